"""Device- and coalition-level economics of the lower game.

Rates enter the congestion cost in Mbit/s so that congestion coefficients in
[0.05, 0.15] yield costs on the same scale as revenues.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass
from itertools import accumulate
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .model import NetworkInstance

MBIT = 1e6


@dataclass(frozen=True)
class EconomicParams:
    unit_price: tuple[float, ...]  # rho_l
    fixed_reward: tuple[float, ...]  # x_l
    congestion_coef: tuple[float, ...]  # alpha_l
    improvement_coef: float = 1.0  # xi

    def __post_init__(self):
        n = len(self.unit_price)
        if len(self.fixed_reward) != n or len(self.congestion_coef) != n:
            raise ValueError("per-edge economic lists must have equal length")
        if any(p <= 0 for p in self.unit_price):
            raise ValueError("unit prices must be positive")
        if any(x < 0 for x in self.fixed_reward):
            raise ValueError("fixed rewards must be non-negative")
        if any(a <= 0 for a in self.congestion_coef):
            raise ValueError("congestion coefficients must be positive")
        if self.improvement_coef <= 0:
            raise ValueError("improvement coefficient must be positive")


def model_improvement(k: int, total_data: float, xi: float) -> float:
    if total_data < 0:
        raise ValueError("total_data must be non-negative")
    return xi * math.sqrt(k * total_data)


def coalition_revenue(data: Sequence[float], k: int, rho: float, xi: float, fixed_reward: float) -> float:
    """Reward paid by an edge server to a coalition whose members train ``data`` units each."""
    if len(data) == 0:
        raise ValueError("coalition must be nonempty")
    return rho * model_improvement(k, float(np.sum(data)), xi) + len(data) * fixed_reward


def congestion_cost(rates: Sequence[float], alpha: float) -> float:
    """Per-member congestion cost; ``rates`` in bit/s."""
    if any(r < 0 for r in rates):
        raise ValueError("rates must be non-negative")
    return alpha * (float(np.sum(rates)) / MBIT) ** 2


def member_rates(inst: "NetworkInstance", members: Sequence[int], edge: int, bandwidth: float) -> np.ndarray:
    members = np.asarray(members, dtype=int)
    if len(members) == 0:
        return np.zeros(0)
    return bandwidth / len(members) * inst.spectral_efficiency[members, edge]


def _check_rates(data: np.ndarray, rates: np.ndarray) -> None:
    from .model import InfeasibleError

    if np.any((rates <= 0) & (data > 0)):
        raise InfeasibleError("a member with zero uplink rate cannot train positive data")


def coalition_utility(
    inst: "NetworkInstance",
    members: Sequence[int],
    edge: int,
    k: int,
    data: Sequence[float],
    bandwidth: float,
) -> float:
    """Revenue minus |S| per-member congestion costs for the given data profile."""
    if bandwidth < 0:
        raise ValueError("bandwidth must be non-negative")
    econ = inst.econ
    data = np.asarray(data, dtype=float)
    rates = member_rates(inst, members, edge, bandwidth)
    _check_rates(data, rates)
    revenue = coalition_revenue(data, k, econ.unit_price[edge], econ.improvement_coef, econ.fixed_reward[edge])
    return revenue - len(data) * congestion_cost(rates, econ.congestion_coef[edge])


def device_utility(
    inst: "NetworkInstance",
    device: int,
    members: Sequence[int],
    edge: int,
    k: int,
    data: Sequence[float],
    bandwidth: float,
) -> float:
    """Data-proportional share of the improvement reward, plus the fixed reward, minus congestion.

    ``data`` is aligned with ``members``. With no data in the coalition the share term is 0.
    """
    members = list(members)
    if device not in members:
        raise ValueError(f"device {device} is not a member of the coalition")
    econ = inst.econ
    data = np.asarray(data, dtype=float)
    rates = member_rates(inst, members, edge, bandwidth)
    _check_rates(data, rates)
    total = float(data.sum())
    share = 0.0
    if total > 0:
        reward = econ.unit_price[edge] * model_improvement(k, total, econ.improvement_coef)
        share = reward * data[members.index(device)] / total
    return share + econ.fixed_reward[edge] - congestion_cost(rates, econ.congestion_coef[edge])


def nash_data_strategy(
    inst: "NetworkInstance", device: int, coalition_size: int, edge: int, k: int, bandwidth: float
) -> float:
    """Deadline-saturating data amount: (T/K - s/R_n) f_n/C_n, clamped at 0."""
    if k < 1:
        raise ValueError("aggregation count must be >= 1")
    cfg = inst.config
    rate = bandwidth / coalition_size * inst.spectral_efficiency[device, edge]
    if rate <= 0:
        return 0.0
    budget = cfg.cloud_interval / k - cfg.model_size / rate
    return max(0.0, budget) * inst.throughput[device]


def equilibrium_data(inst: "NetworkInstance", members: Sequence[int], edge: int, k: int, bandwidth: float) -> np.ndarray:
    members = np.asarray(members, dtype=int)
    if len(members) == 0:
        return np.zeros(0)
    cfg = inst.config
    if bandwidth <= 0:
        return np.zeros(len(members))
    rates = member_rates(inst, members, edge, bandwidth)
    budget = cfg.cloud_interval / k - cfg.model_size / rates
    return np.maximum(budget, 0.0) * inst.throughput[members]


def total_utility(inst: "NetworkInstance", assignment: Sequence[int], agg_counts: Sequence[int], bandwidth: Sequence[float]) -> float:
    """Sum of coalition utilities at the members' equilibrium data amounts."""
    assignment = np.asarray(assignment)
    total = 0.0
    for l in range(inst.n_edges):
        members = np.flatnonzero(assignment == l)
        if len(members) == 0:
            continue
        k = int(agg_counts[l])
        data = equilibrium_data(inst, members, l, k, bandwidth[l])
        total += coalition_utility(inst, members, l, k, data, bandwidth[l])
    return total


class CoalitionCurve:
    """Coalition utility as a function of (bandwidth, K) at equilibrium data.

    Members are sorted by spectral efficiency so that the set of devices with a
    positive data budget is a suffix; each evaluation is a bisection plus a few
    float operations. This is the hot path of switch evaluation.
    """

    __slots__ = (
        "edge", "members", "size", "se", "phi", "_se_sorted", "_suf_phi", "_suf_phi_se",
        "se_sum", "rho", "xi", "fixed", "alpha", "interval", "model_size",
    )

    def __init__(self, inst: "NetworkInstance", members: Sequence[int], edge: int):
        self.edge = edge
        self.members = np.asarray(members, dtype=int)
        self.size = len(self.members)
        self.se = inst.spectral_efficiency[self.members, edge]
        self.phi = inst.throughput[self.members]
        order = np.argsort(self.se, kind="stable")
        se_sorted = self.se[order].tolist()
        phi_sorted = self.phi[order].tolist()
        self._se_sorted = se_sorted
        # suffix sums: entry i is the sum over sorted positions i..end
        self._suf_phi = list(accumulate(reversed(phi_sorted), initial=0.0))[::-1]
        self._suf_phi_se = list(accumulate((p / s for p, s in zip(reversed(phi_sorted), reversed(se_sorted))), initial=0.0))[::-1]
        self.se_sum = float(sum(se_sorted))
        econ = inst.econ
        self.rho = econ.unit_price[edge]
        self.xi = econ.improvement_coef
        self.fixed = econ.fixed_reward[edge]
        self.alpha = econ.congestion_coef[edge]
        self.interval = inst.config.cloud_interval
        self.model_size = inst.config.model_size

    def _active_from(self, bandwidth: float, k: int) -> int:
        """First sorted position whose data budget is positive."""
        threshold = self.model_size * self.size * k / (bandwidth * self.interval)
        return bisect_right(self._se_sorted, threshold)

    def total_data(self, bandwidth: float, k: int) -> float:
        if self.size == 0 or bandwidth <= 0:
            return 0.0
        i = self._active_from(bandwidth, k)
        total = self.interval / k * self._suf_phi[i] - self.model_size * self.size / bandwidth * self._suf_phi_se[i]
        return max(total, 0.0)

    def kinks(self, k: int) -> list[float]:
        """Bandwidths at which a member's data budget crosses zero (ascending)."""
        scale = self.model_size * self.size * k / self.interval
        return sorted(scale / se for se in self._se_sorted)

    def revenue_slope(self, bandwidth: float, k: int) -> float:
        return self.slope(bandwidth, k) + self.congestion_slope(bandwidth)

    def congestion_slope(self, bandwidth: float) -> float:
        if self.size == 0:
            return 0.0
        return 2.0 * self.alpha * self.se_sum**2 * bandwidth / (self.size * MBIT**2)

    def rate_sum_mbit(self, bandwidth: float) -> float:
        if self.size == 0:
            return 0.0
        return bandwidth * self.se_sum / self.size / MBIT

    def congestion(self, bandwidth: float) -> float:
        """Per-member congestion cost."""
        return self.alpha * self.rate_sum_mbit(bandwidth) ** 2

    def revenue_improvement(self, bandwidth: float, k: int) -> float:
        return self.rho * self.xi * math.sqrt(k * self.total_data(bandwidth, k))

    def value(self, bandwidth: float, k: int) -> float:
        n = self.size
        if n == 0:
            return 0.0
        base = n * (self.fixed - self.alpha * (bandwidth * self.se_sum / n / MBIT) ** 2)
        if bandwidth <= 0:
            return base
        # inlined total_data: this runs a million times per formation run
        i = bisect_right(self._se_sorted, self.model_size * n * k / (bandwidth * self.interval))
        total = self.interval / k * self._suf_phi[i] - self.model_size * n / bandwidth * self._suf_phi_se[i]
        if total <= 0:
            return base
        return self.rho * self.xi * math.sqrt(k * total) + base

    def values(self, bandwidth: np.ndarray, k: int) -> np.ndarray:
        """Vectorized ``value`` over an array of bandwidths."""
        b = np.asarray(bandwidth, dtype=float)
        n = self.size
        if n == 0:
            return np.zeros_like(b)
        base = n * (self.fixed - self.alpha * (b * self.se_sum / n / MBIT) ** 2)
        safe = np.where(b > 0, b, 1.0)
        i = np.searchsorted(self._se_sorted, self.model_size * n * k / (safe * self.interval), side="right")
        total = self.interval / k * np.asarray(self._suf_phi)[i] - self.model_size * n / safe * np.asarray(self._suf_phi_se)[i]
        total = np.where(b > 0, np.maximum(total, 0.0), 0.0)
        return self.rho * self.xi * np.sqrt(k * total) + base

    def slope(self, bandwidth: float, k: int) -> float:
        """d value / d bandwidth; one-sided (0) where every member's data is clamped."""
        if self.size == 0:
            return 0.0
        congestion_slope = self.congestion_slope(bandwidth)
        if bandwidth <= 0:
            return -congestion_slope
        i = self._active_from(bandwidth, k)
        total = self.total_data(bandwidth, k)
        if total <= 0:
            return -congestion_slope
        d_total = self.model_size * self.size / bandwidth**2 * self._suf_phi_se[i]
        return self.rho * self.xi * k * d_total / (2.0 * math.sqrt(k * total)) - congestion_slope

    def member_data(self, bandwidth: float, k: int) -> np.ndarray:
        if self.size == 0 or bandwidth <= 0:
            return np.zeros(self.size)
        budget = self.interval / k - self.model_size * self.size / (bandwidth * self.se)
        return np.maximum(budget, 0.0) * self.phi

    def member_utilities(self, bandwidth: float, k: int) -> np.ndarray:
        """Utility of each member (aligned with ``members``)."""
        data = self.member_data(bandwidth, k)
        total = float(data.sum())
        base = self.fixed - self.congestion(bandwidth)
        if total <= 0:
            return np.full(self.size, base)
        reward = self.rho * self.xi * math.sqrt(k * total)
        return reward * data / total + base
