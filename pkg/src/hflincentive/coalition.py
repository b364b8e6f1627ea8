"""Lower-level coalition formation: preference rules, switch evaluation, the
formation loop and stability certification.

A switch of device ``n`` from coalition ``l`` to ``j`` is evaluated on the full
post-switch configuration: the pair's bandwidth is re-split by the restricted
gradient-projection solver, the cloud re-prices the two affected edges (the
default ``repricing="pair"``), and the two edges answer with their aggregation
counts. Nothing outside the pair changes, which keeps the total device utility
an exact potential for the altruistic rule.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from .bandwidth import GPConfig, build_curves
from .bandwidth import solve as solve_bandwidth
from .stackelberg import EdgeMarket, apply_edge_aggregations_rule, build_markets, cloud_utility, solve_pricing
from .utility import CoalitionCurve

if TYPE_CHECKING:
    from .model import NetworkInstance

log = logging.getLogger(__name__)


class PreferenceRule(str, enum.Enum):
    SELFISH = "selfish"
    PARETO = "pareto"
    ALTRUISTIC = "altruistic"
    BANDWIDTH_ONLY = "bandwidth_only"


SWITCHING_RULES = (PreferenceRule.SELFISH, PreferenceRule.PARETO, PreferenceRule.ALTRUISTIC)


@dataclass
class FormationConfig:
    gp: GPConfig = field(default_factory=GPConfig)
    repricing: str = "pair"  # "pair": affected edges re-priced inside each switch; "full": whole market after each accept
    tolerance: float = 1e-9  # strict-improvement margin
    stall_factor: int = 50  # consecutive rejections (times N) before an exhaustive stability check
    max_attempts: int = 10_000
    coverage_radius: float = 500.0  # meters, bandwidth-only baseline

    def __post_init__(self):
        if self.repricing not in ("pair", "full"):
            raise ValueError(f"unknown repricing mode {self.repricing!r}")


@dataclass
class CoalitionPartition:
    assignment: np.ndarray  # edge index per device
    bandwidth: np.ndarray  # Hz per edge
    agg_counts: np.ndarray  # K per edge, 0 for empty coalitions
    rewards: np.ndarray  # cloud unit reward chi per edge

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=int)
        self.bandwidth = np.asarray(self.bandwidth, dtype=float)
        self.agg_counts = np.asarray(self.agg_counts, dtype=int)
        self.rewards = np.asarray(self.rewards, dtype=float)

    @property
    def n_edges(self) -> int:
        return len(self.bandwidth)

    @property
    def coalitions(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.assignment == l) for l in range(self.n_edges)]

    def copy(self) -> "CoalitionPartition":
        return CoalitionPartition(self.assignment.copy(), self.bandwidth.copy(), self.agg_counts.copy(), self.rewards.copy())

    def validate(self, total_bandwidth: float, rtol: float = 1e-12) -> None:
        n_edges = self.n_edges
        if np.any(self.assignment < 0) or np.any(self.assignment >= n_edges):
            raise ValueError("assignment refers to a nonexistent edge")
        if np.any(self.bandwidth < 0):
            raise ValueError("negative bandwidth")
        if self.bandwidth.sum() > total_bandwidth * (1 + rtol):
            raise ValueError(f"bandwidth sum {self.bandwidth.sum()} exceeds total {total_bandwidth}")
        sizes = np.bincount(self.assignment, minlength=n_edges)
        if np.any((sizes > 0) & (self.agg_counts < 1)):
            raise ValueError("nonempty coalition without a positive aggregation count")
        if np.any(self.rewards < 0):
            raise ValueError("negative unit reward")

    def to_dict(self) -> dict:
        return {
            "assignment": self.assignment.tolist(),
            "bandwidth": self.bandwidth.tolist(),
            "agg_counts": self.agg_counts.tolist(),
            "rewards": self.rewards.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CoalitionPartition":
        return cls(doc["assignment"], doc["bandwidth"], doc["agg_counts"], doc["rewards"])


@dataclass
class SwitchRecord:
    iteration: int
    device: int
    from_edge: int
    to_edge: int
    rule: str
    accepted: bool
    potential_before: float
    potential_after: float

    CSV_HEADER = ("iteration", "device", "from", "to", "rule", "accepted", "psi_before", "psi_after")

    def csv_row(self) -> tuple:
        return (self.iteration, self.device, self.from_edge, self.to_edge, self.rule, int(self.accepted),
                repr(self.potential_before), repr(self.potential_after))


@dataclass
class SwitchEvaluation:
    device: int
    from_edge: int
    to_edge: int
    rule: PreferenceRule
    accepted: bool
    reason: str
    mover_before: float
    mover_after: float
    others_before: dict  # device -> utility, remaining members of both affected coalitions
    others_after: dict
    pair_before: float  # summed utility of both affected coalitions
    pair_after: float
    potential_before: float
    potential_after: float
    candidate: Optional[CoalitionPartition] = None


# --- potential -----------------------------------------------------------


def device_utilities(inst: "NetworkInstance", partition: CoalitionPartition) -> np.ndarray:
    """Utility of every device in its current coalition."""
    out = np.zeros(inst.n_devices)
    for l, members in enumerate(partition.coalitions):
        if len(members) == 0:
            continue
        curve = CoalitionCurve(inst, members, l)
        out[members] = curve.member_utilities(float(partition.bandwidth[l]), int(partition.agg_counts[l]))
    return out


def potential_value(inst: "NetworkInstance", partition: CoalitionPartition) -> float:
    """Sum of all device utilities."""
    return float(device_utilities(inst, partition).sum())


def verify_potential_identity(
    inst: "NetworkInstance", before: CoalitionPartition, after: CoalitionPartition, device: int
) -> float:
    """|Delta U_n - Delta psi| where U_n sums the utilities of both coalitions the device moves between."""
    l, j = int(before.assignment[device]), int(after.assignment[device])
    u_before = device_utilities(inst, before)
    u_after = device_utilities(inst, after)
    touched_before = (before.assignment == l) | (before.assignment == j)
    touched_after = (after.assignment == l) | (after.assignment == j)
    delta_u = u_after[touched_after].sum() - u_before[touched_before].sum()
    delta_psi = u_after.sum() - u_before.sum()
    return abs(float(delta_u - delta_psi))


# --- game state ------------------------------------------------------------


class CoalitionGame:
    """Switch evaluation against a fixed current configuration, with memoization."""

    def __init__(self, inst: "NetworkInstance", partition: CoalitionPartition, rule: PreferenceRule, config: FormationConfig = None):
        self.inst = inst
        self.rule = PreferenceRule(rule)
        self.config = config or FormationConfig()
        self.set_partition(partition)

    def set_partition(self, partition: CoalitionPartition) -> None:
        self.partition = partition
        self.curves = build_curves(self.inst, partition.assignment)
        self.markets = build_markets(self.inst, self.curves, partition.bandwidth)
        self.member_utils = [
            c.member_utilities(float(partition.bandwidth[l]), int(partition.agg_counts[l])) if c.size else np.zeros(0)
            for l, c in enumerate(self.curves)
        ]
        self.coalition_values = [float(u.sum()) for u in self.member_utils]
        self.device_utils = [0.0] * self.inst.n_devices
        for c, u in zip(self.curves, self.member_utils):
            for dev, v in zip(c.members.tolist(), u.tolist()):
                self.device_utils[dev] = v
        self.potential = float(sum(self.coalition_values))
        self._cache: dict[tuple[int, int], SwitchEvaluation] = {}

    def evaluate(self, device: int, target: int) -> SwitchEvaluation:
        key = (device, target)
        ev = self._cache.get(key)
        if ev is None:
            ev = self._evaluate(device, target)
            self._cache[key] = ev
        return ev

    def _utility_of(self, edge: int, device: int) -> float:
        return self.device_utils[device]

    def _evaluate(self, n: int, j: int) -> SwitchEvaluation:
        inst, part, cfg = self.inst, self.partition, self.config
        l = int(part.assignment[n])
        psi = self.potential
        if j == l:
            u = self._utility_of(l, n)
            return SwitchEvaluation(n, l, j, self.rule, False, "same coalition", u, u, {}, {}, 0.0, 0.0, psi, psi)

        new_assign = part.assignment.copy()
        new_assign[n] = j
        curve_l = CoalitionCurve(inst, np.flatnonzero(new_assign == l), l)
        curve_j = CoalitionCurve(inst, np.flatnonzero(new_assign == j), j)
        curves = list(self.curves)
        curves[l], curves[j] = curve_l, curve_j

        # bandwidth of the pair, re-split under the current aggregation counts
        ks_gp = part.agg_counts.copy()
        ks_gp[l] = max(1, ks_gp[l])
        ks_gp[j] = max(1, ks_gp[j])
        res = solve_bandwidth(inst, new_assign, ks_gp, cfg.gp, pair=(l, j),
                              pair_sum=float(part.bandwidth[l] + part.bandwidth[j]), curves=curves)
        bandwidth = part.bandwidth.copy()
        bandwidth[l], bandwidth[j] = res.bandwidth[l], res.bandwidth[j]

        markets = list(self.markets)
        markets[l] = EdgeMarket(curve_l, bandwidth[l], inst.market)
        markets[j] = EdgeMarket(curve_j, bandwidth[j], inst.market)
        rewards = part.rewards.copy()
        if cfg.repricing == "pair":
            priced = solve_pricing(markets, inst.market, chi=part.rewards, agg_counts=part.agg_counts, update=(l, j))
            rewards, ks = priced.chi, priced.agg_counts
        else:
            for e in (l, j):
                if rewards[e] == 0 and markets[e].participating:
                    table = markets[e].price_table()
                    if table:
                        rewards[e] = 0.5 * (table[0][0] + table[-1][0])
            ks = apply_edge_aggregations_rule(markets, rewards, part.agg_counts, l, j)
        if curve_l.size == 0:
            ks[l], rewards[l] = 0, 0.0

        candidate = CoalitionPartition(new_assign, bandwidth, ks, rewards)
        utils_l = curve_l.member_utilities(float(bandwidth[l]), int(ks[l])) if curve_l.size else np.zeros(0)
        utils_j = curve_j.member_utilities(float(bandwidth[j]), int(ks[j]))
        pair_before = self.coalition_values[l] + self.coalition_values[j]
        pair_after = float(utils_l.sum() + utils_j.sum())
        psi_after = psi - pair_before + pair_after

        mover_before = self._utility_of(l, n)
        mover_after = float(utils_j[int(np.flatnonzero(curve_j.members == n)[0])])
        others_before, others_after = {}, {}
        for utils, curve in ((utils_l, curve_l), (utils_j, curve_j)):
            for dev, v in zip(curve.members.tolist(), utils.tolist()):
                if dev != n:
                    others_after[dev] = v
                    others_before[dev] = self.device_utils[dev]

        ev = SwitchEvaluation(n, l, j, self.rule, False, "", mover_before, mover_after, others_before, others_after,
                              pair_before, pair_after, psi, psi_after, candidate)
        cfg_t = self.config.tolerance
        if not self._feasible_target(n, curve_j, bandwidth[j]):
            ev.reason = "device cannot train in the target coalition at any aggregation count"
            return ev
        if self.rule is PreferenceRule.SELFISH:
            ev.accepted = mover_after > mover_before + cfg_t
        elif self.rule is PreferenceRule.PARETO:
            nobody_loses = all(others_after[d] >= others_before[d] - cfg_t for d in others_after)
            ev.accepted = mover_after > mover_before + cfg_t and nobody_loses
        elif self.rule is PreferenceRule.ALTRUISTIC:
            ev.accepted = pair_after > pair_before + cfg_t
        else:
            ev.reason = "rule does not switch"
            return ev
        ev.reason = "improves" if ev.accepted else "no strict improvement"
        return ev

    def _feasible_target(self, n: int, curve: CoalitionCurve, bandwidth: float) -> bool:
        cfg = self.inst.config
        if bandwidth <= 0:
            return False
        rate = bandwidth / curve.size * self.inst.spectral_efficiency[n, curve.edge]
        return cfg.cloud_interval - cfg.model_size / rate > 0

    def first_improving(self) -> Optional[tuple[int, int]]:
        for n in range(self.inst.n_devices):
            for j in range(self.inst.n_edges):
                if j != self.partition.assignment[n] and self.evaluate(n, j).accepted:
                    return (n, j)
        return None

    def apply(self, ev: SwitchEvaluation) -> None:
        candidate = ev.candidate
        if self.config.repricing == "full":
            candidate = reprice_all(self.inst, candidate)
        self.set_partition(candidate)


def reprice_all(inst: "NetworkInstance", partition: CoalitionPartition) -> CoalitionPartition:
    """Run the cloud's pricing over every edge and let all edges respond."""
    curves = build_curves(inst, partition.assignment)
    markets = build_markets(inst, curves, partition.bandwidth)
    priced = solve_pricing(markets, inst.market)
    out = partition.copy()
    out.rewards, out.agg_counts = priced.chi, priced.agg_counts
    return out


def evaluate_switch(
    inst: "NetworkInstance", partition: CoalitionPartition, device: int, target: int, rule: PreferenceRule, config: FormationConfig = None
) -> SwitchEvaluation:
    """Hypothetical evaluation of one switch; ``partition`` is never modified."""
    return CoalitionGame(inst, partition, rule, config).evaluate(device, target)


def is_stable(inst: "NetworkInstance", partition: CoalitionPartition, rule: PreferenceRule, config: FormationConfig = None):
    """(True, None) if no device has an accepted switch, else (False, (device, target))."""
    dev = CoalitionGame(inst, partition, rule, config).first_improving()
    return dev is None, dev


# --- formation loop -----------------------------------------------------------


@dataclass
class FormationResult:
    rule: PreferenceRule
    partition: CoalitionPartition
    records: list  # SwitchRecord per attempt
    psi_by_attempt: list  # potential after every attempt (index 0 = initial)
    psi_by_switch: list  # potential after every accepted switch (index 0 = initial)
    converged: bool
    attempts: int
    cloud_utility: float
    edge_utilities: np.ndarray
    initial_partition: CoalitionPartition = None

    @property
    def accepted(self) -> int:
        return len(self.psi_by_switch) - 1

    @property
    def total_utility(self) -> float:
        return self.psi_by_attempt[-1]


def initial_configuration(inst: "NetworkInstance", assignment: Sequence[int], config: FormationConfig) -> CoalitionPartition:
    """One global gradient-projection pass, then one pricing pass.

    No aggregation counts exist before the cloud prices, so the bandwidth pass
    uses K = 1 for every nonempty coalition (the data-maximal setting).
    """
    assignment = np.asarray(assignment, dtype=int)
    sizes = np.bincount(assignment, minlength=inst.n_edges)
    ks = (sizes > 0).astype(int)
    res = solve_bandwidth(inst, assignment, ks, config.gp)
    return reprice_all(inst, CoalitionPartition(assignment, res.bandwidth, ks, np.zeros(inst.n_edges)))


def market_outcome(inst: "NetworkInstance", partition: CoalitionPartition) -> tuple[float, np.ndarray]:
    """Cloud utility and per-edge utilities of a configuration."""
    curves = build_curves(inst, partition.assignment)
    markets = build_markets(inst, curves, partition.bandwidth)
    try:
        cloud = cloud_utility(partition.rewards, partition.agg_counts, markets, inst.market)
    except ValueError:
        cloud = -math.inf
    edges = np.array([
        m.utility(int(k), float(c)) if m.participating else -m.size * m.fixed
        for m, c, k in zip(markets, partition.rewards, partition.agg_counts)
    ])
    return cloud, edges


def coverage_assignment(inst: "NetworkInstance", radius: float) -> np.ndarray:
    """Each device joins the highest-price edge within ``radius`` (nearest on ties, nearest overall if none)."""
    prices = np.array(inst.econ.unit_price)
    out = np.empty(inst.n_devices, dtype=int)
    for n, dev in enumerate(inst.devices):
        dist = np.array([math.dist(dev.position, e.position) for e in inst.edges])
        covering = np.flatnonzero(dist <= radius)
        if len(covering) == 0:
            out[n] = int(np.argmin(dist))
            continue
        best = covering[prices[covering] == prices[covering].max()]
        out[n] = int(best[np.argmin(dist[best])])
    return out


def run_formation(
    inst: "NetworkInstance",
    rule: PreferenceRule,
    config: FormationConfig = None,
    rng: Optional[np.random.Generator] = None,
    initial_assignment: Optional[Sequence[int]] = None,
) -> FormationResult:
    """Random-device, random-target switch dynamics until an exhaustive stability check passes."""
    config = config or FormationConfig()
    rule = PreferenceRule(rule)
    rng = rng if rng is not None else np.random.default_rng(inst.config.rng_seed)
    n_dev, n_edge = inst.n_devices, inst.n_edges

    if rule is PreferenceRule.BANDWIDTH_ONLY:
        start = initial_configuration(inst, coverage_assignment(inst, config.coverage_radius), config)
        psi = potential_value(inst, start)
        cloud, edges = market_outcome(inst, start)
        return FormationResult(rule, start, [], [psi], [psi], True, 0, cloud, edges, start)

    if initial_assignment is None:
        initial_assignment = rng.integers(0, n_edge, size=n_dev)
    start = initial_configuration(inst, initial_assignment, config)
    game = CoalitionGame(inst, start, rule, config)
    records: list[SwitchRecord] = []
    psi_by_attempt = [game.potential]
    psi_by_switch = [game.potential]
    stall_limit = config.stall_factor * n_dev
    stall = 0
    converged = n_edge == 1
    attempts = 0
    while not converged and attempts < config.max_attempts:
        attempts += 1
        n = int(rng.integers(n_dev))
        r = int(rng.integers(n_edge - 1))
        current = int(game.partition.assignment[n])
        j = r if r < current else r + 1
        ev = game.evaluate(n, j)
        records.append(SwitchRecord(attempts, n, current, j, rule.value, ev.accepted, ev.potential_before, ev.potential_after))
        if ev.accepted:
            game.apply(ev)
            psi_by_switch.append(game.potential)
            stall = 0
        else:
            stall += 1
        psi_by_attempt.append(game.potential)
        if stall >= stall_limit:
            if game.first_improving() is None:
                converged = True
            else:
                stall = 0
    if not converged:
        log.warning("%s formation did not certify stability within %d attempts", rule.value, config.max_attempts)
    cloud, edges = market_outcome(inst, game.partition)
    return FormationResult(rule, game.partition, records, psi_by_attempt, psi_by_switch, converged, attempts, cloud, edges, start)
