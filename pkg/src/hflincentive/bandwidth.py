"""Gradient-projection bandwidth allocation for a fixed coalition partition."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from .utility import CoalitionCurve

if TYPE_CHECKING:
    from .model import NetworkInstance

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GPConfig:
    step_size: float = 1.0  # initial (and maximal) backtracking step
    max_iters: int = 500
    tolerance: float = 1e-6  # relative objective change that stops the iteration
    projection_tolerance: float = 1e-12  # relative step length treated as stationary
    min_step: float = 1e-8
    scan_points: int = 32  # coarse scan that seeds the pair starts; 0 disables extra starts

    def __post_init__(self):
        if self.step_size <= 0 or self.tolerance <= 0 or self.max_iters < 1 or self.scan_points < 0:
            raise ValueError("invalid GP configuration")


@dataclass
class GPResult:
    bandwidth: np.ndarray  # per-edge Hz, zeros outside the solved scope's nonempty coalitions
    objective: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)  # (iteration, objective, gamma, feasibility residual)


def project(raw: Sequence[float], total: float) -> np.ndarray:
    """Euclidean projection onto {B >= 0, sum(B) <= total}."""
    clipped = np.maximum(np.asarray(raw, dtype=float), 0.0)
    if clipped.sum() <= total:
        return clipped
    return project_simplex(raw, total)


def project_simplex(raw: Sequence[float], total: float) -> np.ndarray:
    """Euclidean projection onto {B >= 0, sum(B) == total} by sort and threshold."""
    v = np.asarray(raw, dtype=float)
    if v.size == 0:
        return v.copy()
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - total
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def build_curves(inst: "NetworkInstance", assignment: Sequence[int]) -> list[CoalitionCurve]:
    assignment = np.asarray(assignment)
    return [CoalitionCurve(inst, np.flatnonzero(assignment == l), l) for l in range(inst.n_edges)]


def objective(bandwidth: Sequence[float], assignment: Sequence[int], agg_counts: Sequence[int], inst: "NetworkInstance") -> float:
    """Total coalition utility with every device at its deadline-saturating data amount."""
    return sum(c.value(float(b), int(k)) for c, b, k in zip(build_curves(inst, assignment), bandwidth, agg_counts))


def gradient(bandwidth: Sequence[float], assignment: Sequence[int], agg_counts: Sequence[int], inst: "NetworkInstance") -> np.ndarray:
    return np.array([c.slope(float(b), int(k)) for c, b, k in zip(build_curves(inst, assignment), bandwidth, agg_counts)])


def solve(
    inst: "NetworkInstance",
    assignment: Sequence[int],
    agg_counts: Sequence[int],
    config: GPConfig = GPConfig(),
    pair: Optional[tuple[int, int]] = None,
    pair_sum: Optional[float] = None,
    curves: Optional[Sequence[CoalitionCurve]] = None,
    trace: bool = False,
) -> GPResult:
    """Maximize total coalition utility over bandwidth.

    With ``pair=(l, j)`` only those two coalitions are re-allocated and their
    bandwidths always sum to ``pair_sum``; every other entry of the result is 0.
    """
    if curves is None:
        curves = build_curves(inst, assignment)
    if pair is None:
        scope = [l for l in range(inst.n_edges) if curves[l].size > 0]
        total = inst.config.total_bandwidth
        equality = False
    else:
        if pair[0] == pair[1]:
            raise ValueError("restricted scope needs two distinct coalitions")
        if pair_sum is None or pair_sum < 0:
            raise ValueError("restricted scope needs a non-negative pair_sum")
        scope = [l for l in pair if curves[l].size > 0]
        total = float(pair_sum)
        equality = True
    ks = [max(1, int(agg_counts[l])) for l in scope]
    sub = [curves[l] for l in scope]
    out = np.zeros(inst.n_edges)

    def f(x):
        return sum(c.value(b, k) for c, b, k in zip(sub, x, ks))

    if not scope:
        return GPResult(out, 0.0, 0, True)
    if len(scope) == 1 and equality:
        out[scope[0]] = total
        return GPResult(out, f([total]), 0, True)

    if equality and len(scope) == 2:
        proj = _project_pair
    else:
        proj = project_simplex if equality else project

    best = None
    for x0, piece in _starts(sub, ks, total, config.scan_points, equality, proj):
        if best is not None and piece is not None:
            bound = _piece_bound(sub, ks, total, *piece)
            if bound <= best[1] + 1e-12 * max(1.0, abs(best[1])):
                continue
        run = _ascend(f, sub, ks, x0, total, equality, proj, config, trace)
        if best is None or run[1] > best[1]:
            best = run
    x, value, iters, converged, history = best
    if not converged:
        log.warning("bandwidth GP stopped at max_iters=%d without meeting tolerance", config.max_iters)
    for l, b in zip(scope, x):
        out[l] = b
    return GPResult(out, value, iters, converged, history)


def _starts(sub, ks, total, scan_points, equality=True, proj=None) -> list:
    """Initial points for the ascent.

    The clamped objective is not concave, so a single start can stop in a
    local maximum. For two coalitions sharing a fixed sum the segment is cut
    at every kink (a member's data budget reaching zero); between kinks the
    objective is concave, so one start per piece at its best sampled point
    covers every local maximum. Otherwise the starts are the projected vector
    of per-coalition maximizers (exact when it fits the budget), the equal
    split, the size-proportional split and one coalition-favoring split per
    coalition. Each start comes with the piece it lies in, or None.
    """
    m = len(sub)
    if m < 2 or scan_points < 2 or total <= 0:
        return [([total / m] * m, None)]
    if m == 2 and equality:
        cuts = [b for b in sub[0].kinks(ks[0]) if 0 < b < total]
        cuts += [total - b for b in sub[1].kinks(ks[1]) if 0 < b < total]
        edges = sorted({0.0, total, *cuts})
        mids = [0.5 * (a + b) for a, b in zip(edges, edges[1:])]
        t = np.sort(np.concatenate((np.linspace(0.0, total, 2 * (scan_points // 2) + 1), mids)))
        scores = (sub[0].values(t, ks[0]) + sub[1].values(total - t, ks[1])).tolist()
        # one pass over the sorted scan, keeping the best point of each piece
        starts, p = [], 0
        best = None
        for ti, si in zip(t.tolist(), scores):
            while p + 2 < len(edges) and ti > edges[p + 1]:
                if best is not None:
                    starts.append((*best, edges[p], edges[p + 1]))
                best, p = None, p + 1
            if best is None or si > best[0]:
                best = (si, ti)
        if best is not None:
            starts.append((*best, edges[p], edges[p + 1]))
        starts.sort(reverse=True)
        return [([b, total - b], (lo, hi)) for _, b, lo, hi in starts]
    sizes = [c.size for c in sub]
    starts = [[total / m] * m, [total * s / sum(sizes) for s in sizes]]
    if not equality:
        solo = [curve_argmax(c, k, total) for c, k in zip(sub, ks)]
        starts.insert(0, solo if sum(solo) <= total else list(proj(np.array(solo), total)))
    for i in range(m):
        starts.append([total * (0.7 if q == i else 0.3 / (m - 1)) for q in range(m)])
    return [(x, None) for x in starts]


def curve_argmax(curve: CoalitionCurve, k: int, upper: float) -> float:
    """Maximizer of one coalition's utility over bandwidth in [0, upper].

    The curve is concave between consecutive kinks, so each piece is solved
    by bisection on the slope and the best piece wins.
    """
    cuts = sorted({0.0, float(upper), *(b for b in curve.kinks(k) if 0 < b < upper)})
    best_b, best_v = 0.0, curve.value(0.0, k)
    for lo, hi in zip(cuts, cuts[1:]):
        eps = 1e-12 * max(hi, 1.0)
        if curve.slope(lo + eps, k) <= 0:
            b = lo
        elif curve.slope(hi - eps, k) >= 0:
            b = hi
        else:
            a, c = lo, hi
            for _ in range(100):
                mid = 0.5 * (a + c)
                if curve.slope(mid, k) > 0:
                    a = mid
                else:
                    c = mid
                if c - a <= 1e-12 * hi:
                    break
            b = 0.5 * (a + c)
        v = curve.value(b, k)
        if v > best_v:
            best_b, best_v = b, v
    return best_b


def _piece_bound(sub, ks, total, lo, hi) -> float:
    """Upper bound on the pair objective over a kink-free piece [lo, hi].

    The objective is concave there, so it lies below both end tangents; the
    bound is the value where those tangents meet.
    """
    eps = 1e-12 * max(total, 1.0)
    a, b = lo + eps, hi - eps
    if b <= a:
        return math.inf

    def val(t):
        return sub[0].value(t, ks[0]) + sub[1].value(total - t, ks[1])

    def slope(t):
        return sub[0].slope(t, ks[0]) - sub[1].slope(total - t, ks[1])

    fa, fb, ga, gb = val(a), val(b), slope(a), slope(b)
    if not all(map(math.isfinite, (fa, fb, ga, gb))):
        return math.inf
    if ga <= 0:
        return fa
    if gb >= 0:
        return fb
    t = (fb - fa + ga * a - gb * b) / (ga - gb)
    return fa + ga * (t - a)


def _ascend(f, sub, ks, x, total, equality, proj, config, trace):
    x = list(x)
    value = f(x)
    debug = log.isEnabledFor(logging.DEBUG)
    gamma = config.step_size
    history = []
    converged = False
    iters = 0
    for iters in range(1, config.max_iters + 1):
        g = [c.slope(b, k) for c, b, k in zip(sub, x, ks)]
        gmax = max(abs(v) for v in g)
        if gmax == 0:
            converged = True
            break
        target = proj([b + total * v / gmax for b, v in zip(x, g)], total)
        step = [t - b for t, b in zip(target, x)]
        if max(abs(s) for s in step) <= config.projection_tolerance * max(total, 1.0):
            converged = True
            break
        gamma = min(config.step_size, 2.0 * gamma)
        while True:
            cand = _feasible([b + gamma * s for b, s in zip(x, step)], total, equality)
            cand_value = f(cand)
            if cand_value > value or gamma < config.min_step:
                break
            gamma *= 0.5
        # keep halving while shorter steps do better: the clamped objective has
        # flat regions that a long improving step can land in
        while cand_value > value and gamma >= 2 * config.min_step:
            half = _feasible([b + 0.5 * gamma * s for b, s in zip(x, step)], total, equality)
            half_value = f(half)
            if half_value < cand_value:
                break
            cand, cand_value, gamma = half, half_value, 0.5 * gamma
        if cand_value <= value:
            converged = True  # no ascent along the projected direction
            break
        gain = cand_value - value
        x, value = cand, cand_value
        if trace or debug:
            residual = max(0.0, sum(x) - total) + max(0.0, -min(x))
            if trace:
                history.append((iters, value, gamma, residual))
            if debug:
                log.debug("gp coalitions=%d iter=%d objective=%.12g gamma=%.3g residual=%.3g", len(sub), iters, value, gamma, residual)
        if gain <= config.tolerance * max(1.0, abs(value)):
            converged = True
            break
    return x, value, iters, converged, history


def _project_pair(raw: Sequence[float], total: float) -> list[float]:
    """Closed-form simplex projection for two coordinates."""
    a = 0.5 * (raw[0] - raw[1] + total)
    a = min(max(a, 0.0), total)
    return [a, total - a]


def _feasible(x: list[float], total: float, equality: bool) -> list[float]:
    x = [max(b, 0.0) for b in x]
    if equality and len(x) == 2:
        return [x[0], total - x[0]] if x[0] <= total else [total, 0.0]
    s = sum(x)
    if s > total:
        x = [b * total / s for b in x]
    return x


def reallocate_on_switch(
    inst: "NetworkInstance",
    assignment: Sequence[int],
    agg_counts: Sequence[int],
    bandwidth: Sequence[float],
    l: int,
    j: int,
    config: GPConfig = GPConfig(),
    curves: Optional[Sequence[CoalitionCurve]] = None,
) -> tuple[float, float]:
    """Redistribute B_l + B_j between coalitions l and j; other coalitions keep their bandwidth."""
    pair_sum = float(bandwidth[l]) + float(bandwidth[j])
    res = solve(inst, assignment, agg_counts, config, pair=(l, j), pair_sum=pair_sum, curves=curves)
    return float(res.bandwidth[l]), float(res.bandwidth[j])
