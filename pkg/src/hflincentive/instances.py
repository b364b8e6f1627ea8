"""Random instances drawn from the simulation parameter ranges.

A range is either a scalar (fixed value) or a ``[low, high]`` pair sampled
uniformly. Channel gains follow distance path loss ``d ** -exponent``, scaled
so that a mid-power device at ``ref_distance`` sees ``snr_ref_db``, then
clipped into ``[snr_min_db, snr_max_db]``.
"""

from __future__ import annotations

import math
from typing import Any, Mapping, Optional

import numpy as np

from .model import Device, EdgeServer, NetworkInstance, StackelbergParams, SystemConfig
from .utility import EconomicParams

DEFAULT_RANGES: dict[str, Any] = {
    "n_devices": 12,
    "n_edges": 4,
    "area_side": 1000.0,  # m
    "cpu_freq": [1e9, 4e9],
    "cycles_per_unit": 3e9,
    "tx_power": [0.2, 0.5],
    "congestion_coef": [0.05, 0.15],
    "cloud_interval": [15.0, 25.0],
    "model_size": 3e6,
    "total_bandwidth": 5e6,
    "noise_power": 1e-7,
    "unit_price": [5.0, 15.0],
    "fixed_reward": 1.0,
    "improvement_coef": 1.0,
    "path_loss_exponent": 3.5,
    "ref_distance": 500.0,
    "snr_ref_db": 10.0,
    "snr_min_db": 0.0,
    "snr_max_db": 20.0,
    "min_distance": 10.0,
    "loss_valuation": 1.0,
    "max_loss": 3.0,
    "h_beta": 2.0,
    "h_a": 1.0,
    "h_b": 1.0,
    "price_step_frac": 0.02,
}

MAX_RESAMPLES = 100


def merge_ranges(overrides: Optional[Mapping[str, Any]] = None) -> dict[str, Any]:
    ranges = dict(DEFAULT_RANGES)
    for key, value in (overrides or {}).items():
        if key not in ranges:
            raise ValueError(f"unknown parameter {key!r}")
        ranges[key] = value
    validate_ranges(ranges)
    return ranges


def validate_ranges(ranges: Mapping[str, Any]) -> None:
    for key, value in ranges.items():
        if key.endswith("_db"):
            continue
        lo, hi = _bounds(value)
        if lo > hi:
            raise ValueError(f"{key}: empty range {value!r}")
        if key in ("fixed_reward", "h_b"):
            if lo < 0:
                raise ValueError(f"{key} must be non-negative")
        elif lo <= 0:
            raise ValueError(f"{key} must be positive")
    if int(ranges["n_devices"]) < int(ranges["n_edges"]):
        raise ValueError("need at least as many devices as edge servers")


def _bounds(value) -> tuple[float, float]:
    if isinstance(value, (list, tuple)):
        if len(value) != 2:
            raise ValueError(f"range must be [low, high], got {value!r}")
        return float(value[0]), float(value[1])
    return float(value), float(value)


def _draw(rng: np.random.Generator, value, size=None):
    lo, hi = _bounds(value)
    if size is None:
        return float(rng.uniform(lo, hi)) if hi > lo else lo
    return rng.uniform(lo, hi, size=size) if hi > lo else np.full(size, lo)


def generate_instance(ranges: Optional[Mapping[str, Any]] = None, rng: Optional[np.random.Generator] = None, seed: int = 0) -> NetworkInstance:
    """Sample a feasible instance; resamples up to 100 times before giving up."""
    r = merge_ranges(ranges)
    rng = rng if rng is not None else np.random.default_rng(seed)
    for _ in range(MAX_RESAMPLES):
        inst = _sample(r, rng, seed)
        if inst.is_feasible():
            return inst
    raise RuntimeError(f"no feasible instance after {MAX_RESAMPLES} draws; check the parameter ranges")


def _sample(r: Mapping[str, Any], rng: np.random.Generator, seed: int) -> NetworkInstance:
    n, l = int(r["n_devices"]), int(r["n_edges"])
    side = float(r["area_side"])
    dev_pos = rng.uniform(0.0, side, size=(n, 2))
    edge_pos = rng.uniform(0.0, side, size=(l, 2))
    cpu = _draw(rng, r["cpu_freq"], n)
    cycles = _draw(rng, r["cycles_per_unit"], n)
    power = _draw(rng, r["tx_power"], n)
    alpha = _draw(rng, r["congestion_coef"], l)
    rho = _draw(rng, r["unit_price"], l)
    fixed = _draw(rng, r["fixed_reward"], l)
    interval = _draw(rng, r["cloud_interval"])

    noise = float(_bounds(r["noise_power"])[0])
    dist = np.maximum(np.linalg.norm(dev_pos[:, None, :] - edge_pos[None, :, :], axis=2), float(r["min_distance"]))
    mid_power = float(np.mean(_bounds(r["tx_power"])))
    ref_gain = 10 ** (float(r["snr_ref_db"]) / 10) * noise / mid_power
    gains = ref_gain * (dist / float(r["ref_distance"])) ** (-float(r["path_loss_exponent"]))
    lo_gain = 10 ** (float(r["snr_min_db"]) / 10) * noise / power[:, None]
    hi_gain = 10 ** (float(r["snr_max_db"]) / 10) * noise / power[:, None]
    gains = np.clip(gains, lo_gain, hi_gain)

    config = SystemConfig(
        total_bandwidth=float(_bounds(r["total_bandwidth"])[0]),
        cloud_interval=interval,
        model_size=float(_bounds(r["model_size"])[0]),
        noise_power=noise,
        rng_seed=int(seed) % 2**64,
    )
    devices = tuple(
        Device(i, float(cpu[i]), float(cycles[i]), float(power[i]), (float(dev_pos[i, 0]), float(dev_pos[i, 1])))
        for i in range(n)
    )
    edges = tuple(EdgeServer(i, (float(edge_pos[i, 0]), float(edge_pos[i, 1]))) for i in range(l))
    econ = EconomicParams(
        unit_price=tuple(float(v) for v in rho),
        fixed_reward=tuple(float(v) for v in fixed),
        congestion_coef=tuple(float(v) for v in alpha),
        improvement_coef=float(_bounds(r["improvement_coef"])[0]),
    )
    market = StackelbergParams(
        loss_valuation=float(_bounds(r["loss_valuation"])[0]),
        max_loss=float(_bounds(r["max_loss"])[0]),
        h_beta=float(_bounds(r["h_beta"])[0]),
        h_a=float(_bounds(r["h_a"])[0]),
        h_b=float(_bounds(r["h_b"])[0]),
        price_step_frac=float(_bounds(r["price_step_frac"])[0]),
    )
    return NetworkInstance(config, devices, edges, gains, econ, market)


def snr_db(inst: NetworkInstance) -> np.ndarray:
    return 10 * np.log10(inst.snr)


def describe(inst: NetworkInstance) -> str:
    return (f"N={inst.n_devices} L={inst.n_edges} T={inst.config.cloud_interval:.2f}s "
            f"rho={[round(p, 2) for p in inst.econ.unit_price]} digest={inst.digest()[:12]}")


__all__ = ["DEFAULT_RANGES", "generate_instance", "merge_ranges", "validate_ranges", "snr_db", "describe"]
