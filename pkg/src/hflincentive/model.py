"""Problem instance and physical-layer timing/rate formulas.

All quantities are SI internally: Hz, bits, seconds, watts.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .utility import EconomicParams


class InfeasibleError(ValueError):
    """A device or coalition cannot meet its deadline (e.g. zero uplink rate)."""


@dataclass(frozen=True)
class SystemConfig:
    total_bandwidth: float = 5e6  # Hz
    cloud_interval: float = 20.0  # s, also the global-round length used by the data strategy
    model_size: float = 3e6  # bits
    noise_power: float = 1e-7  # W
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("total_bandwidth", "cloud_interval", "model_size", "noise_power"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)!r}")
        if not 0 <= int(self.rng_seed) < 2**64:
            raise ValueError("rng_seed must fit in 64 unsigned bits")


@dataclass(frozen=True)
class Device:
    id: int
    cpu_freq: float  # cycles/s
    cycles_per_unit: float  # cycles per data unit
    tx_power: float  # W
    position: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if min(self.cpu_freq, self.cycles_per_unit, self.tx_power) <= 0:
            raise ValueError(f"device {self.id}: cpu_freq, cycles_per_unit and tx_power must be positive")

    @property
    def throughput(self) -> float:
        """Data units processed per second (f_n / C_n)."""
        return self.cpu_freq / self.cycles_per_unit


@dataclass(frozen=True)
class EdgeServer:
    id: int
    position: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class StackelbergParams:
    """Parameters of the cloud/edge pricing game."""

    loss_valuation: float = 1.0  # lambda
    max_loss: float = 3.0  # G
    h_beta: float = 2.0
    h_a: float = 1.0
    h_b: float = 1.0
    price_step_frac: float = 0.02  # zeta as a fraction of each edge's tabulated price range

    def __post_init__(self):
        if self.loss_valuation < 0 or self.max_loss <= 0 or self.h_beta <= 0 or self.h_a <= 0 or self.h_b < 0:
            raise ValueError("invalid Stackelberg parameters")
        if self.price_step_frac <= 0:
            raise ValueError("price_step_frac must be positive")


@dataclass(frozen=True, eq=False)
class NetworkInstance:
    """Immutable problem instance: devices, edge servers, channel gains and constants."""

    config: SystemConfig
    devices: tuple[Device, ...]
    edges: tuple[EdgeServer, ...]
    gains: np.ndarray  # (N, L) channel gains h_{n,l}
    econ: EconomicParams
    market: StackelbergParams = field(default_factory=StackelbergParams)

    def __post_init__(self):
        gains = np.array(self.gains, dtype=float)
        gains.setflags(write=False)
        object.__setattr__(self, "gains", gains)
        object.__setattr__(self, "devices", tuple(self.devices))
        object.__setattr__(self, "edges", tuple(self.edges))
        n, l = len(self.devices), len(self.edges)
        if l < 1 or n < l:
            raise ValueError(f"need N >= L >= 1, got N={n}, L={l}")
        if gains.shape != (n, l):
            raise ValueError(f"gain matrix shape {gains.shape} does not match (N, L)=({n}, {l})")
        if not np.all(gains > 0):
            raise ValueError("channel gains must be strictly positive")
        if len(self.econ.unit_price) != l:
            raise ValueError("economic parameters must have one row per edge server")

    @property
    def n_devices(self) -> int:
        return len(self.devices)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def throughput(self) -> np.ndarray:
        """f_n / C_n for every device."""
        return np.array([d.throughput for d in self.devices])

    @cached_property
    def snr(self) -> np.ndarray:
        power = np.array([d.tx_power for d in self.devices])
        return power[:, None] * self.gains / self.config.noise_power

    @cached_property
    def spectral_efficiency(self) -> np.ndarray:
        """log2(1 + P_n h_{n,l} / sigma^2), shape (N, L)."""
        return np.log2(1.0 + self.snr)

    def feasible_edges(self, device: int) -> np.ndarray:
        """Edges where the device has a positive data budget at one aggregation per round,
        given an equal per-device share of the total bandwidth."""
        cfg = self.config
        rate = cfg.total_bandwidth / self.n_devices * self.spectral_efficiency[device]
        return np.flatnonzero(cfg.cloud_interval - cfg.model_size / rate > 0)

    def is_feasible(self) -> bool:
        return all(len(self.feasible_edges(n)) > 0 for n in range(self.n_devices))

    # --- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        cfg = self.config
        return {
            "config": {
                "total_bandwidth": cfg.total_bandwidth,
                "cloud_interval": cfg.cloud_interval,
                "model_size": cfg.model_size,
                "noise_power": cfg.noise_power,
                "rng_seed": int(cfg.rng_seed),
            },
            "devices": [
                {
                    "id": d.id,
                    "cpu_freq": d.cpu_freq,
                    "cycles_per_unit": d.cycles_per_unit,
                    "tx_power": d.tx_power,
                    "position": list(d.position),
                }
                for d in self.devices
            ],
            "edges": [
                {
                    "id": e.id,
                    "position": list(e.position),
                    "unit_price": float(self.econ.unit_price[i]),
                    "fixed_reward": float(self.econ.fixed_reward[i]),
                    "congestion_coef": float(self.econ.congestion_coef[i]),
                }
                for i, e in enumerate(self.edges)
            ],
            "improvement_coef": self.econ.improvement_coef,
            "market": {
                "loss_valuation": self.market.loss_valuation,
                "max_loss": self.market.max_loss,
                "h_beta": self.market.h_beta,
                "h_a": self.market.h_a,
                "h_b": self.market.h_b,
                "price_step_frac": self.market.price_step_frac,
            },
            "channel": {
                "shape": list(self.gains.shape),
                "gains": [float(g) for g in self.gains.ravel(order="C")],
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "NetworkInstance":
        devices = tuple(
            Device(
                id=int(d["id"]),
                cpu_freq=float(d["cpu_freq"]),
                cycles_per_unit=float(d["cycles_per_unit"]),
                tx_power=float(d["tx_power"]),
                position=tuple(d.get("position", (0.0, 0.0))),
            )
            for d in doc["devices"]
        )
        edges = tuple(EdgeServer(id=int(e["id"]), position=tuple(e.get("position", (0.0, 0.0)))) for e in doc["edges"])
        econ = EconomicParams(
            unit_price=tuple(float(e["unit_price"]) for e in doc["edges"]),
            fixed_reward=tuple(float(e["fixed_reward"]) for e in doc["edges"]),
            congestion_coef=tuple(float(e["congestion_coef"]) for e in doc["edges"]),
            improvement_coef=float(doc.get("improvement_coef", 1.0)),
        )
        shape = tuple(doc["channel"]["shape"])
        gains = np.array(doc["channel"]["gains"], dtype=float).reshape(shape)
        return cls(
            config=SystemConfig(**doc["config"]),
            devices=devices,
            edges=edges,
            gains=gains,
            econ=econ,
            market=StackelbergParams(**doc.get("market", {})),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkInstance":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


# --- timing and rate formulas -------------------------------------------


def edge_aggregation_period(cloud_interval: float, k: int) -> float:
    """Length of one edge round when ``k`` edge aggregations fit in a cloud interval."""
    if k < 1 or int(k) != k:
        raise ValueError(f"aggregation count must be a positive integer, got {k!r}")
    if cloud_interval <= 0:
        raise ValueError("cloud_interval must be positive")
    return cloud_interval / k


def local_training_time(data_units: float, device: Device) -> float:
    if data_units < 0:
        raise ValueError("data_units must be non-negative")
    return data_units * device.cycles_per_unit / device.cpu_freq


def uplink_rate(
    device: Device,
    edge: EdgeServer,
    coalition_size: int,
    coalition_bandwidth: float,
    channel: np.ndarray,
    noise: float,
) -> float:
    """Rate of one device that shares its coalition's bandwidth equally with the other members."""
    if coalition_size < 1:
        raise ValueError("coalition_size must be at least 1")
    if coalition_bandwidth < 0:
        raise ValueError("coalition_bandwidth must be non-negative")
    snr = device.tx_power * channel[device.id, edge.id] / noise
    return coalition_bandwidth / coalition_size * math.log2(1.0 + snr)


def upload_time(model_size: float, rate: float) -> Optional[float]:
    """Seconds to upload the local model, or ``None`` when the rate is zero (infeasible)."""
    if rate < 0:
        raise ValueError("rate must be non-negative")
    if rate == 0:
        return None
    return model_size / rate


def coalitions_of(assignment: Sequence[int], n_edges: int) -> list[np.ndarray]:
    """Device index arrays per edge for an assignment vector."""
    assignment = np.asarray(assignment)
    return [np.flatnonzero(assignment == l) for l in range(n_edges)]
