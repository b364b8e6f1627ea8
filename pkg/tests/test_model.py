import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import NOISE, make_instance
from hflincentive.instances import DEFAULT_RANGES, generate_instance, merge_ranges
from hflincentive.model import (
    Device,
    EdgeServer,
    NetworkInstance,
    SystemConfig,
    edge_aggregation_period,
    local_training_time,
    upload_time,
    uplink_rate,
)
from hflincentive.utility import nash_data_strategy


@pytest.mark.parametrize("interval,k,expected", [(20, 1, 20), (20, 4, 5), (15, 7, 15 / 7)])
def test_edge_aggregation_period_examples(interval, k, expected):
    assert edge_aggregation_period(interval, k) == pytest.approx(expected, rel=1e-15)


@pytest.mark.parametrize("k", [0, -1, 2.5])
def test_edge_aggregation_period_rejects_bad_counts(k):
    with pytest.raises(ValueError):
        edge_aggregation_period(20.0, k)


@given(st.floats(0.1, 1e4), st.integers(1, 10_000))
def test_period_times_count_recovers_interval(interval, k):
    assert math.isclose(edge_aggregation_period(interval, k) * k, interval, rel_tol=4e-16)


@pytest.mark.parametrize("units,cycles,freq,expected", [(100, 3e9, 3e9, 100.0), (0, 3e9, 2e9, 0.0), (50, 3e9, 1.5e9, 100.0)])
def test_local_training_time_examples(units, cycles, freq, expected):
    assert local_training_time(units, Device(0, freq, cycles, 0.3)) == pytest.approx(expected)


def _rate(snr, size, bandwidth):
    dev, edge = Device(0, 1e9, 3e9, 1.0), EdgeServer(0)
    return uplink_rate(dev, edge, size, bandwidth, np.array([[snr * NOISE]]), NOISE)


@pytest.mark.parametrize("snr,size,expected", [(1, 1, 1e6), (3, 1, 2e6), (1, 2, 0.5e6)])
def test_uplink_rate_examples(snr, size, expected):
    assert _rate(snr, size, 1e6) == pytest.approx(expected, rel=1e-12)


def test_uplink_rate_zero_bandwidth_and_bad_size():
    assert _rate(5, 3, 0.0) == 0.0
    with pytest.raises(ValueError):
        _rate(1, 0, 1e6)


@given(st.floats(1e-2, 1e3), st.floats(1e-2, 1e3), st.integers(1, 20), st.floats(1e3, 1e7), st.floats(1.01, 3.0))
def test_uplink_rate_monotonicity(snr, snr2, size, bandwidth, factor):
    base = _rate(snr, size, bandwidth)
    assert _rate(snr, size, bandwidth * factor) > base
    assert _rate(snr, size + 1, bandwidth) < base
    lo, hi = sorted((snr, snr2))
    assert _rate(lo, size, bandwidth) <= _rate(hi, size, bandwidth)


def test_upload_time_examples():
    assert upload_time(3e6, 1e6) == pytest.approx(3.0)
    assert upload_time(3e6, 3e6) == pytest.approx(1.0)
    assert upload_time(3e6, 0.0) is None


@given(st.floats(0.05, 200.0), st.integers(1, 6), st.integers(1, 8), st.floats(1e5, 5e6), st.floats(5.0, 30.0))
@settings(max_examples=200)
def test_budget_identity_at_equilibrium_data(snr, size, k, bandwidth, interval):
    inst = make_instance([[snr]], interval=interval)
    data = nash_data_strategy(inst, 0, size, 0, k, bandwidth)
    rate = bandwidth / size * math.log2(1 + snr)
    period = edge_aggregation_period(interval, k)
    if data > 0:
        used = local_training_time(data, inst.devices[0]) + upload_time(inst.config.model_size, rate)
        assert math.isclose(used, period, rel_tol=1e-9)
    else:
        assert upload_time(inst.config.model_size, rate) >= period


def test_instance_json_round_trip_is_exact():
    inst = generate_instance({"n_devices": 9, "n_edges": 3}, seed=5)
    back = NetworkInstance.from_json(inst.to_json())
    assert back.digest() == inst.digest()
    np.testing.assert_array_equal(back.gains, inst.gains)
    assert back.econ == inst.econ and back.market == inst.market and back.config == inst.config


def test_identical_seeds_give_identical_instances():
    assert generate_instance(seed=42).digest() == generate_instance(seed=42).digest()
    assert generate_instance(seed=42).digest() != generate_instance(seed=43).digest()


def test_instance_validation():
    with pytest.raises(ValueError):
        make_instance(np.ones((1, 2)))  # fewer devices than edges
    with pytest.raises(ValueError):
        make_instance([[1.0, -1.0], [1.0, 1.0]])
    with pytest.raises(ValueError):
        SystemConfig(total_bandwidth=0.0)
    with pytest.raises(ValueError):
        merge_ranges({"no_such_parameter": 1})
    with pytest.raises(ValueError):
        merge_ranges({"cpu_freq": [4e9, 1e9]})


def test_default_instance_shape_and_feasibility():
    inst = generate_instance(seed=0)
    assert (inst.n_devices, inst.n_edges) == (12, 4)
    assert inst.is_feasible()
    for n in range(inst.n_devices):
        assert len(inst.feasible_edges(n)) >= 1


def test_sampled_values_stay_in_declared_ranges():
    rng = np.random.default_rng(2024)
    lo_snr, hi_snr = 10 ** (DEFAULT_RANGES["snr_min_db"] / 10), 10 ** (DEFAULT_RANGES["snr_max_db"] / 10)
    for i in range(10_000):
        inst = generate_instance(rng=rng, seed=i)
        cpu = inst.throughput * 3e9
        power = np.array([d.tx_power for d in inst.devices])
        assert np.all((cpu >= 1e9) & (cpu <= 4e9))
        assert np.all((power >= 0.2) & (power <= 0.5))
        assert all(0.05 <= a <= 0.15 for a in inst.econ.congestion_coef)
        assert all(5 <= p <= 15 for p in inst.econ.unit_price)
        assert 15 <= inst.config.cloud_interval <= 25
        assert np.all((inst.snr >= lo_snr * (1 - 1e-12)) & (inst.snr <= hi_snr * (1 + 1e-12)))
        pos = np.array([d.position for d in inst.devices] + [e.position for e in inst.edges])
        assert np.all((pos >= 0) & (pos <= 1000))
        assert inst.config.total_bandwidth == 5e6 and inst.config.model_size == 3e6 and inst.config.noise_power == 1e-7
        assert inst.market.h_beta == 2 and inst.market.max_loss == 3
