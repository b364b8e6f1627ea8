"""Upper-level game: the cloud posts per-edge unit rewards, edge servers answer
with their number of edge aggregations per cloud interval.

Each edge's problem is written in the substituted variable
``z = sqrt(A - K F / B) = sqrt(K * total_data)``, in which the edge utility is
concave, so the integer best response is a neighbor of the unique root of the
first-order condition.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from .utility import CoalitionCurve

if TYPE_CHECKING:
    from .model import NetworkInstance, StackelbergParams

BISECTION_ITERS = 200


class EdgeMarket:
    """One edge server's follower problem for a fixed coalition and bandwidth."""

    def __init__(self, curve: CoalitionCurve, bandwidth: float, params: "StackelbergParams"):
        self.curve = curve
        self.edge = curve.edge
        self.size = curve.size
        self.bandwidth = float(bandwidth)
        self.params = params
        self.rho = curve.rho
        self.xi = curve.xi
        self.fixed = curve.fixed
        self.A = 0.0
        self.F = 0.0
        self.kfeas = 0
        if self.size == 0 or self.bandwidth <= 0:
            return
        se, phi = curve.se, curve.phi
        # largest continuous K each member tolerates: T R_n / s
        kcap = curve.interval * self.bandwidth * se / (self.size * curve.model_size)
        active = kcap > 1.0
        if not active.any():
            return
        self.A = curve.interval * float(phi[active].sum())
        self.F = curve.model_size * self.size * float((phi[active] / se[active]).sum())
        self.kfeas = max(1, int(math.floor(float(kcap[active].min()))))

    @property
    def participating(self) -> bool:
        return self.kfeas >= 1

    def check_k(self, k: int) -> None:
        if not self.participating:
            raise ValueError(f"edge {self.edge} does not participate (no device can train)")
        if not 1 <= k <= self.kfeas:
            raise ValueError(f"K={k} outside feasible range [1, {self.kfeas}] for edge {self.edge}")

    def z(self, k: float) -> float:
        return math.sqrt(max(0.0, self.A - k * self.F / self.bandwidth))

    def accuracy_gain(self, k: int) -> float:
        """G - lambda/z - lambda/K; -inf when the data term vanishes."""
        self.check_k(k)
        p = self.params
        z = self.z(k)
        if z == 0.0:
            return -math.inf if p.loss_valuation > 0 else p.max_loss
        return p.max_loss - p.loss_valuation / z - p.loss_valuation / k

    def improvement_payment(self, k: int) -> float:
        return self.rho * self.xi * self.z(k)

    def utility(self, k: int, chi: float) -> float:
        gain = self.accuracy_gain(k)
        reward = chi * gain if chi != 0 else 0.0
        return reward - self.size * self.fixed - self.improvement_payment(k)

    def utility_z(self, z: float, chi: float) -> float:
        """Edge utility expressed in the substituted variable."""
        p = self.params
        return chi * (p.max_loss - p.loss_valuation / z - self.F * p.loss_valuation / (self.bandwidth * (self.A - z * z))) - self.xi * self.rho * z - self.size * self.fixed

    def utility_z_second_derivative(self, z: float, chi: float) -> float:
        lam, bf = self.params.loss_valuation, self.bandwidth
        gap = self.A - z * z
        return (
            -2.0 * chi * lam / z**3
            - 2.0 * self.F * chi * lam / (bf * gap**2)
            - 8.0 * self.F * chi * z * z * lam / (bf * gap**3)
        )

    def foc_lhs(self, z: float) -> float:
        """lambda/z^2 - 2 F z lambda / (B (A - z^2)^2); strictly decreasing in z."""
        lam = self.params.loss_valuation
        if z == 0.0:
            return math.inf
        gap = self.A - z * z
        if gap <= 0.0:
            return -math.inf
        return lam / (z * z) - 2.0 * self.F * z * lam / (self.bandwidth * gap * gap)

    def foc_root(self, chi: float) -> Optional[float]:
        """Root in z of foc_lhs(z) = xi rho / chi over the feasible K range, or None if it lies outside."""
        if chi <= 0 or self.kfeas <= 1:
            return None
        target = self.xi * self.rho / chi
        lo, hi = self.z(self.kfeas), self.z(1)
        if self.foc_lhs(hi) >= target or self.foc_lhs(lo) <= target:
            return None
        for _ in range(BISECTION_ITERS):
            mid = 0.5 * (lo + hi)
            if mid <= lo or mid >= hi:
                break
            if self.foc_lhs(mid) > target:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def k_of_z(self, z: float) -> float:
        return self.bandwidth * (self.A - z * z) / self.F

    def best_response(self, chi: float) -> int:
        """Integer K maximizing edge utility at unit reward ``chi`` (ties go to the smaller K)."""
        if self.size == 0:
            return 0
        if not self.participating:
            return 1
        if self.kfeas == 1:
            return 1
        if chi <= 0:
            return self.kfeas
        root = self.foc_root(chi)
        if root is None:
            target = self.xi * self.rho / chi
            k_cont = 1.0 if self.foc_lhs(self.z(1)) >= target else float(self.kfeas)
        else:
            k_cont = self.k_of_z(root)
        cands = sorted({min(self.kfeas, max(1, int(math.floor(k_cont)))), min(self.kfeas, max(1, int(math.ceil(k_cont))))})
        return self._pick(cands, chi)

    def _pick(self, cands: Sequence[int], chi: float) -> int:
        best, best_u = cands[0], self.utility(cands[0], chi)
        for k in cands[1:]:
            u = self.utility(k, chi)
            if u > best_u:
                best, best_u = k, u
        return best

    def price_table(self) -> list[tuple[float, int]]:
        """Unit reward at which each feasible K is the exact continuous optimum, ascending in price."""
        if not self.participating:
            return []
        table = []
        for k in range(1, self.kfeas + 1):
            lhs = self.foc_lhs(self.z(k))
            if lhs == math.inf:
                table.append((0.0, k))
            elif lhs > 0:
                table.append((self.xi * self.rho / lhs, k))
        table.sort()
        return table


def h_function(x: float, n_edges: int, params: "StackelbergParams") -> float:
    arg = params.h_a * x / n_edges + params.h_b
    if arg < 0:
        raise ValueError(f"H undefined: a*x/L + b = {arg} < 0")
    return params.h_beta * math.sqrt(arg)


def cloud_utility(chi: Sequence[float], agg_counts: Sequence[int], markets: Sequence[EdgeMarket], params: "StackelbergParams") -> float:
    """H(sum of accuracy gains) minus the rewards paid; non-participating edges contribute nothing."""
    total_gain = 0.0
    payment = 0.0
    for m, c, k in zip(markets, chi, agg_counts):
        if not m.participating:
            continue
        gain = m.accuracy_gain(int(k))
        total_gain += gain
        if c != 0:
            payment += c * gain
    return h_function(total_gain, len(markets), params) - payment


def build_markets(inst: "NetworkInstance", curves: Sequence[CoalitionCurve], bandwidth: Sequence[float]) -> list[EdgeMarket]:
    return [EdgeMarket(c, b, inst.market) for c, b in zip(curves, bandwidth)]


@dataclass
class PricingResult:
    chi: np.ndarray
    agg_counts: np.ndarray
    cloud_utility: float
    cycles: int
    converged: bool
    history: list = field(default_factory=list)  # cloud utility after each accepted move
    tables: dict = field(default_factory=dict)


def solve_pricing(
    markets: Sequence[EdgeMarket],
    params: "StackelbergParams",
    chi: Optional[Sequence[float]] = None,
    agg_counts: Optional[Sequence[int]] = None,
    update: Optional[Sequence[int]] = None,
    max_cycles: int = 1000,
) -> PricingResult:
    """Cyclic coordinate search of the cloud over tabulated unit rewards.

    ``update`` restricts which edges are re-priced (default: all). Edges being
    re-priced start from the midpoint of their tabulated range; the others keep
    the given ``chi`` and ``agg_counts``.
    """
    n = len(markets)
    chi_v = np.zeros(n) if chi is None else np.array(chi, dtype=float)
    ks = np.array([m.best_response(c) for m, c in zip(markets, chi_v)], dtype=int) if agg_counts is None else np.array(agg_counts, dtype=int)
    update = list(range(n)) if update is None else list(update)

    tables: dict[int, list[tuple[float, int]]] = {}
    responses: dict[tuple[int, float], int] = {}
    for l in update:
        m = markets[l]
        if not m.participating:
            chi_v[l] = 0.0
            ks[l] = m.best_response(0.0)
            continue
        table = m.price_table()
        tables[l] = table
        for price, k in table:
            responses[(l, price)] = k
        if table:
            chi_v[l] = 0.5 * (table[0][0] + table[-1][0])
        else:
            chi_v[l] = 0.0
        ks[l] = _response(markets, responses, l, chi_v[l])

    gain_cache: dict[tuple[int, int], float] = {}

    def gain(l, k):
        key = (l, k)
        g = gain_cache.get(key)
        if g is None:
            try:
                g = markets[l].accuracy_gain(k)
            except ValueError:
                g = -math.inf
            gain_cache[key] = g
        return g

    def value(chis, kvec):
        # same quantity as cloud_utility, with per-edge gains memoized
        total_gain = payment = 0.0
        for l, m in enumerate(markets):
            if not m.participating:
                continue
            g = gain(l, int(kvec[l]))
            if g == -math.inf:
                return -math.inf
            total_gain += g
            if chis[l] != 0:
                payment += chis[l] * g
        arg = params.h_a * total_gain / n + params.h_b
        if arg < 0:
            return -math.inf
        return params.h_beta * math.sqrt(arg) - payment

    current = value(chi_v, ks)
    history = [current]
    cycles = 0
    converged = False
    movable = [l for l in update if len(tables.get(l, ())) > 1]
    while cycles < max_cycles:
        cycles += 1
        changed = False
        for l in movable:
            table = tables[l]
            prices = [p for p, _ in table]
            step = params.price_step_frac * (prices[-1] - prices[0])
            for direction in (1.0, -1.0):
                probe = min(prices[-1], max(prices[0], chi_v[l] + direction * step))
                i = bisect_right(prices, probe)
                i = min(max(i, 1), len(prices) - 1)
                best_val, best_price, best_k = -math.inf, None, None
                saved_chi, saved_k = chi_v[l], ks[l]
                for price in (prices[i - 1], prices[i]):
                    k = _response(markets, responses, l, price)
                    chi_v[l], ks[l] = price, k
                    v = value(chi_v, ks)
                    if v > best_val:
                        best_val, best_price, best_k = v, price, k
                chi_v[l], ks[l] = saved_chi, saved_k
                if best_val > current:
                    chi_v[l], ks[l] = best_price, best_k
                    current = best_val
                    history.append(current)
                    changed = True
                    break
        if not changed:
            converged = True
            break
    return PricingResult(chi_v, ks, current, cycles, converged, history, tables)


def _response(markets, responses, l, price) -> int:
    key = (l, price)
    k = responses.get(key)
    if k is None:
        k = markets[l].best_response(price)
        responses[key] = k
    return k


def apply_edge_aggregations_rule(
    markets: Sequence[EdgeMarket], chi: Sequence[float], agg_counts: Sequence[int], l: int, j: int
) -> np.ndarray:
    """Recompute K for the two coalitions touched by a switch at the current rewards."""
    ks = np.array(agg_counts, dtype=int)
    for e in (l, j):
        ks[e] = markets[e].best_response(float(chi[e]))
    return ks
