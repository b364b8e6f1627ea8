"""Acceptance criteria, one test per criterion.

Each test records a single ``CRITERION n: PASS|FAIL ...`` verdict line (echoed
in the terminal summary) and then asserts the same condition, so a failing
criterion fails its test with the measured numbers in the message.
"""

import logging
import math
import os
import time

import numpy as np
import pytest

import oracles
from conftest import small_instances
from test_bandwidth import gradient_errors
from hflincentive.bandwidth import build_curves, solve
from hflincentive.coalition import (
    FormationConfig,
    PreferenceRule,
    evaluate_switch,
    initial_configuration,
    potential_value,
    run_formation,
    verify_potential_identity,
)
from hflincentive.experiment import ExperimentSpec, emit, run_experiment
from hflincentive.instances import generate_instance
from hflincentive.stackelberg import EdgeMarket, build_markets, solve_pricing
from hflincentive.utility import CoalitionCurve

VERDICTS: dict[int, str] = {}
CFG = FormationConfig()
WORKERS = os.cpu_count() or 1
SWEEP_RULES = ("altruistic", "pareto", "bandwidth_only")


def verdict(number: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} {detail}"
    VERDICTS[number] = line
    print(line)
    assert ok, line


@pytest.fixture(autouse=True)
def quiet_formation_warnings():
    # capped runs log a warning each; the verdict lines carry the counts instead
    logger = logging.getLogger("hflincentive")
    level = logger.level
    logger.setLevel(logging.ERROR)
    yield
    logger.setLevel(level)


def sign_test_p(wins: int, losses: int) -> float:
    """One-sided exact sign test: P(X >= wins) for X ~ Binomial(wins + losses, 1/2)."""
    n = wins + losses
    if n == 0:
        return 1.0
    return math.fsum(math.comb(n, k) for k in range(wins, n + 1)) / 2**n


def total_utility_means(result, rules):
    """Mean final total utility per (axis value, rule) over converged trials."""
    means = {}
    for rule in rules:
        for value in result.spec.axis:
            vals = [rep.outcomes[rule].total_utility for rep in result.reports
                    if rep.axis_value == value and rep.outcomes[rule].converged]
            means[(value, rule)] = float(np.mean(vals)) if vals else math.nan
    return means


def is_unimodal(means) -> bool:
    """Rises then falls: one sign change (+ to -) in the first differences of the 3-point moving average."""
    smooth = np.convolve(np.asarray(means, dtype=float), np.ones(3) / 3, mode="valid")
    signs = [s for s in np.sign(np.diff(smooth)) if s != 0]
    changes = sum(1 for a, b in zip(signs, signs[1:]) if a != b)
    return bool(signs) and signs[0] > 0 and signs[-1] < 0 and changes == 1


# --- shared runs of the default experiment ---------------------------------------


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    spec = ExperimentSpec()
    t0 = time.perf_counter()
    result = run_experiment(spec, workers=WORKERS)
    paths = emit(result, tmp_path_factory.mktemp("default_a"))
    return result, paths, time.perf_counter() - t0


@pytest.fixture(scope="module")
def default_rerun(tmp_path_factory):
    result = run_experiment(ExperimentSpec(), workers=WORKERS)
    return emit(result, tmp_path_factory.mktemp("default_b"))


# --- 1 ---------------------------------------------------------------------------


def test_criterion_1_potential_identity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst, count = 0.0, 0
    for i in range(50):
        inst = generate_instance(seed=10_000 + i)
        part = initial_configuration(inst, rng.integers(0, inst.n_edges, size=inst.n_devices), CFG)
        psi = potential_value(inst, part)
        for _ in range(20):
            n = int(rng.integers(inst.n_devices))
            j = int((part.assignment[n] + rng.integers(1, inst.n_edges)) % inst.n_edges)
            ev = evaluate_switch(inst, part, n, j, PreferenceRule.ALTRUISTIC)
            worst = max(worst, verify_potential_identity(inst, part, ev.candidate, n) / max(1.0, abs(psi)))
            count += 1
    elapsed = time.perf_counter() - t0
    ok = count >= 1000 and worst <= 1e-9 and elapsed < 10
    verdict(1, ok, f"{count} switches, worst scaled residual {worst:.2e} (<= 1e-9), {elapsed:.1f}s (< 10s)")


# --- 2 ---------------------------------------------------------------------------


def test_criterion_2_convergence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    instances = [generate_instance({"n_devices": int(rng.integers(6, 19)), "n_edges": 4}, seed=20_000 + i)
                 for i in range(500)]
    converged = {}
    monotone_violations = 0
    for rule in ("altruistic", "pareto"):
        ok = 0
        for i, inst in enumerate(instances):
            res = run_formation(inst, rule, CFG, rng=np.random.default_rng(i))
            ok += res.converged
            if rule == "altruistic":
                psi = res.psi_by_switch
                recomputed = potential_value(inst, res.partition)
                if any(b <= a for a, b in zip(psi, psi[1:])) or not math.isclose(psi[-1], recomputed, rel_tol=1e-9, abs_tol=1e-9):
                    monotone_violations += 1
        converged[rule] = ok
    # a single cap hit already decides the criterion; stop there rather than spend an hour on the rest
    selfish_ok, first_failure = 0, None
    for i, inst in enumerate(instances):
        if run_formation(inst, "selfish", CFG, rng=np.random.default_rng(i)).converged:
            selfish_ok += 1
        else:
            first_failure = i
            break
    elapsed = time.perf_counter() - t0
    selfish_note = (f"selfish 500/500" if first_failure is None
                    else f"selfish hit the 10000-attempt cap on instance {first_failure} ({selfish_ok} converged before it)")
    ok = (converged["altruistic"] == 500 and converged["pareto"] == 500 and first_failure is None
          and monotone_violations == 0 and elapsed < 300)
    verdict(2, ok, f"altruistic {converged['altruistic']}/500, pareto {converged['pareto']}/500, {selfish_note}; "
                   f"psi strictly increasing in {500 - monotone_violations}/500 altruistic runs; {elapsed:.0f}s (< 300s)")


# --- 3 ---------------------------------------------------------------------------


def test_criterion_3_exhaustive_stability_oracle():
    t0 = time.perf_counter()
    stable = {r: 0 for r in ("altruistic", "pareto", "selfish")}
    uncertified, unconfirmed, violations, worst_split = 0, 0, [], 0.0
    for i, inst in enumerate(small_instances(100, seed0=1000)):
        for rule in stable:
            res = run_formation(inst, rule, CFG, rng=np.random.default_rng(i))
            part = res.partition
            splits = {}
            for n in range(inst.n_devices):
                l = int(part.assignment[n])
                for j in range(inst.n_edges):
                    if j != l:
                        splits[(n, j)] = float(evaluate_switch(inst, part, n, j, rule).candidate.bandwidth[l])
            deviations, gap = oracles.audit_partition(inst, part, rule, splits)
            worst_split = max(worst_split, gap)
            if res.converged:
                if deviations:
                    violations.append((i, rule, deviations[0]))
                else:
                    stable[rule] += 1
            else:
                # the loop stopped at the cap; the oracle should agree that someone still wants to move
                uncertified += 1
                unconfirmed += not deviations
    elapsed = time.perf_counter() - t0
    ok = all(v == 100 for v in stable.values()) and not violations and worst_split <= 1e-6 and elapsed < 120
    verdict(3, ok, f"oracle-stable final partitions: altruistic {stable['altruistic']}/100, pareto {stable['pareto']}/100, "
                   f"selfish {stable['selfish']}/100; {uncertified} runs stopped at the cap without a stable partition "
                   f"(oracle confirms a deviation in {uncertified - unconfirmed}); {len(violations)} certified partitions "
                   f"contradicted; worst bandwidth-split shortfall vs grid {worst_split:.1e}; {elapsed:.0f}s (< 120s)")


# --- 4 ---------------------------------------------------------------------------


def separable_grid_optimum(inst, a, ks, steps=1000):
    """Best grid point of v0(b0) + v1(b1) over b0 + b1 <= B with step B/steps, from raw formulas."""
    total = inst.config.total_bandwidth
    members = [[n for n in range(inst.n_devices) if a[n] == l] for l in (0, 1)]
    v = [[oracles.coalition_value(inst, members[l], l, total * i / steps, ks[l]) for i in range(steps + 1)] for l in (0, 1)]
    best_tail = list(np.maximum.accumulate(v[1]))
    return max(v[0][i] + best_tail[steps - i] for i in range(steps + 1))


def test_criterion_4_gradient_projection():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst_pair = worst_global = worst_grad = 0.0
    done = 0
    while done < 50:
        seed = 30_000 + int(rng.integers(1_000_000))
        n = int(rng.integers(2, 19))
        inst = generate_instance({"n_devices": n, "n_edges": 2}, seed=seed)
        a = rng.integers(0, 2, size=n)
        a[:2] = [0, 1]
        ks = [int(k) for k in rng.integers(1, 6, size=2)]
        total = inst.config.total_bandwidth
        if not all(c.total_data(total / 2, k) > 0 for c, k in zip(build_curves(inst, a), ks)):
            continue  # no interior points with data everywhere to probe the gradient
        members = [list(np.flatnonzero(a == l)) for l in (0, 1)]
        pair = solve(inst, a, ks, pair=(0, 1), pair_sum=total)
        _, grid = oracles.pair_grid_optimum(inst, members[0], 0, ks[0], members[1], 1, ks[1], total)
        worst_pair = max(worst_pair, (grid - pair.objective) / abs(grid))
        glob = solve(inst, a, ks)
        grid2 = separable_grid_optimum(inst, a, ks)
        worst_global = max(worst_global, (grid2 - glob.objective) / abs(grid2))
        worst_grad = max(worst_grad, gradient_errors(inst, a, ks, rng, 100))
        done += 1
    elapsed = time.perf_counter() - t0
    ok = worst_pair <= 5e-3 and worst_global <= 5e-3 and worst_grad <= 1e-4 and elapsed < 60
    verdict(4, ok, f"50 instances: worst shortfall vs grid {worst_pair:.1e} (pair sum fixed) and {worst_global:.1e} "
                   f"(sum <= B), limit 5e-3; worst gradient error {worst_grad:.1e} (<= 1e-4) over 100 points each; "
                   f"{elapsed:.1f}s (< 60s)")


# --- 5 ---------------------------------------------------------------------------


def random_market(rng):
    n = int(rng.integers(1, 8))
    inst = generate_instance({"n_devices": max(n, 2), "n_edges": 2}, seed=int(rng.integers(1_000_000)))
    members = list(range(n))
    bandwidth = float(rng.uniform(0.2, 5.0)) * 1e6
    return inst, members, EdgeMarket(CoalitionCurve(inst, members, 0), bandwidth, inst.market)


def test_criterion_5_follower_optimality():
    rng = np.random.default_rng(5)
    cases = mismatches = roots = 0
    worst_foc = max_d2 = -math.inf
    worst_foc = 0.0
    while cases < 200:
        inst, members, m = random_market(rng)
        if not m.participating:
            continue
        raw = oracles.RawMarket(inst, members, 0, m.bandwidth)
        table = m.price_table()
        chi = float(rng.uniform(0.0, 1.5 * table[-1][0])) if table else float(rng.uniform(0.0, 10.0))
        mismatches += m.best_response(chi) != raw.best_k(chi)
        root = m.foc_root(chi) if chi > 0 else None
        if root is not None:
            roots += 1
            target = m.xi * m.rho / chi
            worst_foc = max(worst_foc, abs(m.foc_lhs(root) - target) / target)
        for z in rng.uniform(0.0, math.sqrt(m.A), size=20):
            if 0 < z < math.sqrt(m.A):
                max_d2 = max(max_d2, m.utility_z_second_derivative(float(z), chi))
        cases += 1
    ok = mismatches == 0 and worst_foc <= 1e-6 and max_d2 <= 0 and roots > 0
    verdict(5, ok, f"200 cases: {mismatches} best-response mismatches vs exhaustive argmax; worst FOC residual "
                   f"{worst_foc:.1e} over {roots} interior roots (<= 1e-6); max second derivative {max_d2:.2e} (<= 0)")


# --- 6 ---------------------------------------------------------------------------


def test_criterion_6_leader_near_optimality():
    rng = np.random.default_rng(6)
    worst, non_monotone, unconverged, done = 0.0, 0, 0, 0
    while done < 50:
        n_edges = int(rng.integers(1, 3))
        n = int(rng.integers(n_edges, 9))
        inst = generate_instance({"n_devices": n, "n_edges": n_edges}, seed=int(rng.integers(1_000_000)))
        a = np.arange(n) % n_edges
        rng.shuffle(a)
        bw = rng.dirichlet(np.ones(n_edges)) * inst.config.total_bandwidth * rng.uniform(0.3, 1.0)
        markets = build_markets(inst, build_curves(inst, a), bw)
        if any(m.kfeas > 50 for m in markets) or not any(m.participating for m in markets):
            continue
        res = solve_pricing(markets, inst.market)
        raw = [oracles.RawMarket(inst, list(np.flatnonzero(a == l)), l, float(bw[l])) for l in range(n_edges)]
        best = oracles.exhaustive_pricing(raw, inst.market)
        worst = max(worst, (best - res.cloud_utility) / abs(best))
        non_monotone += any(b < a_ for a_, b in zip(res.history, res.history[1:]))
        unconverged += not res.converged
        done += 1
    ok = worst <= 0.01 and non_monotone == 0
    verdict(6, ok, f"50 instances (L <= 2, K_feas <= 50): worst shortfall vs exhaustive search {worst:.2e} (<= 1e-2); "
                   f"{non_monotone} runs with a decreasing cloud utility step; {unconverged} hit the cycle cap")


# --- 7 ---------------------------------------------------------------------------


def test_criterion_7_altruistic_highest_total_utility(default_run):
    result, _, _ = default_run
    alt = {rep.trial: rep.outcomes["altruistic"] for rep in result.reports}
    parts, ok = [], True
    means = total_utility_means(result, [r.value for r in result.spec.rules])
    for other in ("selfish", "pareto", "bandwidth_only"):
        wins = losses = paired = 0
        for rep in result.reports:
            a, b = alt[rep.trial], rep.outcomes[other]
            if not (a.converged and b.converged):
                continue
            paired += 1
            wins += a.total_utility > b.total_utility
            losses += a.total_utility < b.total_utility
        p = sign_test_p(wins, losses)
        higher = means[(12, "altruistic")] > means[(12, other)]
        ok &= higher and p < 0.05
        parts.append(f"vs {other}: mean {means[(12, 'altruistic')]:.2f} > {means[(12, other)]:.2f}, "
                     f"wins {wins}/{paired} paired converged trials, sign test p={p:.1e}")
    nonconv = {r: sum(not rep.outcomes[r].converged for rep in result.reports) for r in ("altruistic", "selfish", "pareto")}
    ok &= len(result.reports) >= 200
    verdict(7, ok, f"{len(result.reports)} trials at N=12, L=4; " + "; ".join(parts)
            + f"; non-converged trials excluded from means: {nonconv}")


# --- 8 ---------------------------------------------------------------------------


def test_criterion_8_parameter_trends():
    sweeps = {}
    for scenario in ("interval_sweep", "device_sweep_low_cost", "device_sweep_high_cost"):
        result = run_experiment(ExperimentSpec(scenario=scenario, rules=SWEEP_RULES), workers=WORKERS)
        means = total_utility_means(result, SWEEP_RULES)
        sweeps[scenario] = {r: [means[(v, r)] for v in result.spec.axis] for r in SWEEP_RULES}

    def increasing(values):
        return all(b > a for a, b in zip(values, values[1:]))

    fig4 = {r: increasing(v) for r, v in sweeps["interval_sweep"].items()}
    fig5 = {r: increasing(v) for r, v in sweeps["device_sweep_low_cost"].items()}
    fig6 = {r: is_unimodal(v) for r, v in sweeps["device_sweep_high_cost"].items()}

    def fmt(name, checks, key):
        curves = "; ".join(f"{r} [{', '.join(f'{x:.1f}' for x in sweeps[key][r])}] {'ok' if checks[r] else 'no'}"
                           for r in SWEEP_RULES)
        return f"{name}: {curves}"

    ok = all(fig4.values()) and all(fig5.values()) and all(fig6.values())
    verdict(8, ok, " | ".join([
        fmt("increasing in T_cloud 15/20/25", fig4, "interval_sweep"),
        fmt("increasing in N 6..18 at alpha 0.05", fig5, "device_sweep_low_cost"),
        fmt("rise-then-fall in N 6..18 at alpha 0.15", fig6, "device_sweep_high_cost"),
    ]))


# --- 9 and 10 --------------------------------------------------------------------


def test_criterion_9_determinism(default_run, default_rerun):
    _, first, _ = default_run
    same = {name: first[name].read_bytes() == default_rerun[name].read_bytes()
            for name in ("convergence.csv", "convergence_summary.csv")}
    size = first["convergence.csv"].stat().st_size
    verdict(9, all(same.values()), f"two runs of the default spec (seed 0, 200 trials): byte-identical {same}; {size} bytes")


def test_criterion_10_runtime(default_run):
    result, _, wall = default_run
    per_rule = {}
    for rep in result.reports:
        for r, o in rep.outcomes.items():
            per_rule[r] = per_rule.get(r, 0.0) + o.wall_time
    ideal_8 = sum(per_rule.values()) / 8
    verdict(10, wall < 600, f"default 200-trial comparison took {wall:.0f}s with {WORKERS} worker(s) on {os.cpu_count()} "
                            f"core(s) (< 600s); CPU time by rule {{{', '.join(f'{r}: {t:.0f}s' for r, t in per_rule.items())}}}; "
                            f"an ideal 8-way split would take {ideal_8:.0f}s")
