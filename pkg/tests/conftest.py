import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hflincentive.instances import generate_instance
from hflincentive.model import Device, EdgeServer, NetworkInstance, StackelbergParams, SystemConfig
from hflincentive.utility import EconomicParams

NOISE = 1e-7


def make_instance(snr, cpu=None, rho=None, alpha=None, fixed=None, interval=20.0, total_bandwidth=5e6,
                  model_size=3e6, market=None):
    """Hand-built instance whose SNR term P h / noise equals ``snr`` exactly (P = 1 W)."""
    snr = np.atleast_2d(np.asarray(snr, dtype=float))
    n, l = snr.shape
    cpu = [3e9] * n if cpu is None else cpu
    devices = [Device(i, float(cpu[i]), 3e9, 1.0) for i in range(n)]
    edges = [EdgeServer(i) for i in range(l)]
    econ = EconomicParams(
        unit_price=tuple(rho or [10.0] * l),
        fixed_reward=tuple(fixed or [1.0] * l),
        congestion_coef=tuple(alpha or [0.1] * l),
    )
    cfg = SystemConfig(total_bandwidth=total_bandwidth, cloud_interval=interval, model_size=model_size, noise_power=NOISE)
    return NetworkInstance(cfg, devices, edges, snr * NOISE, econ, market or StackelbergParams())


def small_instances(count, seed0=0, max_n=6, max_l=3):
    """Random small instances (N <= max_n, L <= max_l), deterministic in ``seed0``."""
    out = []
    for s in range(seed0, seed0 + count):
        rng = np.random.default_rng(s)
        l = int(rng.integers(2, max_l + 1))
        n = int(rng.integers(l, max_n + 1))
        out.append(generate_instance({"n_devices": n, "n_edges": l}, seed=s))
    return out


@pytest.fixture
def default_instance():
    return generate_instance(seed=11)


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance verdicts (one line per criterion) at the end of the run."""
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "VERDICTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(lines):
        terminalreporter.write_line(lines[number])
