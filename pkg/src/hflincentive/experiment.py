"""Seeded multi-trial experiments over the simulation scenarios.

Every trial draws one instance and one random initial assignment; all rules
run on that same instance from that same starting partition with identical
generator streams, so rule comparisons are paired. Trial streams derive from
``(seed, trial)`` only, which also makes sweep axes use common random numbers.

Outputs are one tidy long CSV per scenario (``scenario, axis, axis_value,
rule, trial, metric, value``), a summary CSV with means and normal 95%
confidence intervals, and a JSON manifest with SHA-256 digests. CSVs contain
no wall-clock data, so a fixed spec and seed reproduce them byte for byte.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import logging
import math
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from . import __version__
from .coalition import FormationConfig, FormationResult, PreferenceRule, run_formation
from .instances import generate_instance, merge_ranges

log = logging.getLogger(__name__)

Z95 = 1.959963984540054


class Scenario(str, enum.Enum):
    CONVERGENCE = "convergence"  # psi trajectories and final utilities, one network size
    INTERVAL_SWEEP = "interval_sweep"  # cloud interval T in {15, 20, 25} s
    DEVICE_SWEEP_LOW_COST = "device_sweep_low_cost"  # N sweep at congestion 0.05
    DEVICE_SWEEP_HIGH_COST = "device_sweep_high_cost"  # N sweep at congestion 0.15
    SERVER_UTILITIES = "server_utilities"  # per-edge and cloud utilities
    SINGLE_PARTITION = "single_partition"  # one stable partition, per-coalition attributes


# scenario -> (axis name, default axis values, fixed overrides)
SCENARIO_AXES: dict[Scenario, tuple[str, tuple, dict]] = {
    Scenario.CONVERGENCE: ("n_devices", (12,), {}),
    Scenario.INTERVAL_SWEEP: ("cloud_interval", (15.0, 20.0, 25.0), {}),
    Scenario.DEVICE_SWEEP_LOW_COST: ("n_devices", (6, 8, 10, 12, 14, 16, 18), {"congestion_coef": 0.05}),
    Scenario.DEVICE_SWEEP_HIGH_COST: ("n_devices", (6, 8, 10, 12, 14, 16, 18), {"congestion_coef": 0.15}),
    Scenario.SERVER_UTILITIES: ("n_devices", (12,), {}),
    Scenario.SINGLE_PARTITION: ("n_devices", (12,), {}),
}

ALL_RULES = (PreferenceRule.ALTRUISTIC, PreferenceRule.SELFISH, PreferenceRule.PARETO, PreferenceRule.BANDWIDTH_ONLY)
TRAJECTORY_POINTS = 60  # psi samples per trial (by accepted switch and by sweep of N attempts)
CSV_COLUMNS = ("scenario", "axis", "axis_value", "rule", "trial", "metric", "value")
SUMMARY_COLUMNS = ("scenario", "axis", "axis_value", "rule", "metric", "mean", "ci95", "n", "n_nonconverged")


@dataclass
class ExperimentSpec:
    scenario: Scenario = Scenario.CONVERGENCE
    trials: int = 200
    seed: int = 0
    rules: tuple = ALL_RULES
    parameter_ranges: dict = field(default_factory=dict)  # overrides of the instance ranges
    axis_values: Optional[tuple] = None  # defaults per scenario
    max_attempts: int = 10_000
    nonconvergence_threshold: float = 0.01

    def __post_init__(self):
        self.scenario = Scenario(self.scenario)
        if isinstance(self.rules, str):
            self.rules = tuple(r for r in self.rules.split(",") if r)
        self.rules = tuple(PreferenceRule(r) for r in self.rules)
        if not self.rules:
            raise ValueError("at least one rule is required")
        if len(set(self.rules)) != len(self.rules):
            raise ValueError("duplicate rules")
        if int(self.trials) < 1:
            raise ValueError("trials must be >= 1")
        self.trials = int(self.trials)
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = int(self.seed)
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if not 0 <= self.nonconvergence_threshold <= 1:
            raise ValueError("nonconvergence_threshold must lie in [0, 1]")
        self.parameter_ranges = dict(self.parameter_ranges or {})
        if self.axis_values is not None:
            self.axis_values = tuple(self.axis_values)
            if not self.axis_values:
                raise ValueError("axis_values must be nonempty when given")
        # validate every axis point's ranges now rather than inside a worker
        for value in self.axis:
            merge_ranges(self.ranges_at(value))

    @property
    def axis_name(self) -> str:
        return SCENARIO_AXES[self.scenario][0]

    @property
    def axis(self) -> tuple:
        return self.axis_values if self.axis_values is not None else SCENARIO_AXES[self.scenario][1]

    def ranges_at(self, axis_value) -> dict:
        ranges = dict(SCENARIO_AXES[self.scenario][2])
        ranges.update(self.parameter_ranges)
        ranges[self.axis_name] = axis_value
        return ranges

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["scenario"] = self.scenario.value
        doc["rules"] = [r.value for r in self.rules]
        doc["axis_values"] = list(self.axis)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown spec keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class RuleOutcome:
    rule: str
    converged: bool
    attempts: int
    accepted: int
    total_utility: float
    cloud_utility: float
    edge_utilities: list
    partition: dict
    psi_by_switch: list  # sampled, held at the final value
    psi_by_sweep: list  # psi after every N attempts, held at the final value
    wall_time: float
    records: Optional[list] = None  # SwitchRecord list, only when logs are kept


@dataclass
class TrialReport:
    trial: int
    axis_value: Any
    instance_digest: str
    unit_prices: list
    outcomes: dict  # rule value -> RuleOutcome


def trial_streams(seed: int, trial: int) -> tuple[np.random.SeedSequence, np.random.SeedSequence]:
    """(instance stream, formation stream) for one trial."""
    inst_ss, form_ss = np.random.SeedSequence([seed, trial]).spawn(2)
    return inst_ss, form_ss


def _sample_held(values: Sequence[float], points: int) -> list[float]:
    values = list(values)
    return [float(values[min(i, len(values) - 1)]) for i in range(points)]


def run_trial(spec: ExperimentSpec, trial: int, axis_value, keep_logs: bool = False, trace_gp: bool = False) -> TrialReport:
    inst_ss, form_ss = trial_streams(spec.seed, trial)
    inst = generate_instance(spec.ranges_at(axis_value), rng=np.random.default_rng(inst_ss), seed=spec.seed)
    form_state = form_ss.generate_state(2)
    start_rng = np.random.default_rng(form_state[0])
    assignment = start_rng.integers(0, inst.n_edges, size=inst.n_devices)
    config = FormationConfig(max_attempts=spec.max_attempts)
    if trace_gp:
        logging.getLogger("hflincentive.bandwidth").setLevel(logging.DEBUG)
    outcomes = {}
    for rule in spec.rules:
        t0 = time.perf_counter()
        res = run_formation(inst, rule, config, rng=np.random.default_rng(form_state[1]), initial_assignment=assignment)
        outcomes[rule.value] = _outcome(res, inst.n_devices, time.perf_counter() - t0, keep_logs)
    return TrialReport(trial, axis_value, inst.digest(), list(inst.econ.unit_price), outcomes)


def _outcome(res: FormationResult, n_devices: int, wall: float, keep_logs: bool) -> RuleOutcome:
    by_sweep = res.psi_by_attempt[::n_devices]
    return RuleOutcome(
        rule=res.rule.value,
        converged=res.converged,
        attempts=res.attempts,
        accepted=res.accepted,
        total_utility=float(res.total_utility),
        cloud_utility=float(res.cloud_utility),
        edge_utilities=[float(v) for v in res.edge_utilities],
        partition=res.partition.to_dict(),
        psi_by_switch=_sample_held(res.psi_by_switch, TRAJECTORY_POINTS),
        psi_by_sweep=_sample_held(by_sweep, TRAJECTORY_POINTS),
        wall_time=wall,
        records=list(res.records) if keep_logs else None,
    )


def _run_job(args):
    spec_doc, trial, axis_value, trace_gp = args
    return run_trial(ExperimentSpec.from_dict(spec_doc), trial, axis_value, trace_gp=trace_gp)


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    reports: list  # TrialReport, sorted by (axis index, trial)
    wall_time: float

    def runs(self, rules: Iterable[PreferenceRule] = None) -> list[RuleOutcome]:
        wanted = {PreferenceRule(r).value for r in (rules or self.spec.rules)}
        return [o for rep in self.reports for k, o in rep.outcomes.items() if k in wanted]

    def nonconvergence_fraction(self) -> float:
        switching = [o for o in self.runs() if o.rule != PreferenceRule.BANDWIDTH_ONLY.value]
        if not switching:
            return 0.0
        return sum(not o.converged for o in switching) / len(switching)

    def rows(self) -> list[tuple]:
        return trial_rows(self.spec, self.reports)

    def summary_rows(self) -> list[tuple]:
        return summarize(self.rows())


def run_experiment(spec: ExperimentSpec, workers: int = 1, trace_gp: bool = False) -> ExperimentResult:
    if spec.scenario is Scenario.SINGLE_PARTITION:
        trials = 1
    else:
        trials = spec.trials
    jobs = [(spec.to_dict(), t, v, trace_gp) for v in spec.axis for t in range(trials)]
    t0 = time.perf_counter()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_run_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        reports = [_run_job(job) for job in jobs]
    order = {v: i for i, v in enumerate(spec.axis)}
    reports.sort(key=lambda r: (order[r.axis_value], r.trial))
    return ExperimentResult(spec, reports, time.perf_counter() - t0)


# --- tabulation --------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def trial_rows(spec: ExperimentSpec, reports: Sequence[TrialReport]) -> list[tuple]:
    sc, axis = spec.scenario.value, spec.axis_name
    rows = []
    for rep in reports:
        for rule in spec.rules:
            o = rep.outcomes[rule.value]
            base = (sc, axis, _fmt(rep.axis_value), rule.value, str(rep.trial))
            metrics = [
                ("converged", o.converged),
                ("attempts", o.attempts),
                ("accepted_switches", o.accepted),
                ("total_utility", o.total_utility),
                ("cloud_utility", o.cloud_utility),
            ]
            if spec.scenario in (Scenario.SERVER_UTILITIES, Scenario.SINGLE_PARTITION):
                metrics += [(f"edge_utility_{l}", u) for l, u in enumerate(o.edge_utilities)]
            if spec.scenario is Scenario.CONVERGENCE:
                metrics += [(f"psi_switch_{i:03d}", v) for i, v in enumerate(o.psi_by_switch)]
                metrics += [(f"psi_sweep_{i:03d}", v) for i, v in enumerate(o.psi_by_sweep)]
            if spec.scenario is Scenario.SINGLE_PARTITION:
                metrics += _coalition_metrics(o, rep.unit_prices)
            rows.extend(base + (name, _fmt(v)) for name, v in metrics)
    return rows


def _coalition_metrics(o: RuleOutcome, prices: Sequence[float]) -> list[tuple[str, float]]:
    part = o.partition
    assignment = np.asarray(part["assignment"])
    out = []
    for l in range(len(part["bandwidth"])):
        out += [
            (f"coalition_{l}_size", int((assignment == l).sum())),
            (f"coalition_{l}_unit_price", prices[l]),
            (f"coalition_{l}_bandwidth", part["bandwidth"][l]),
            (f"coalition_{l}_agg_count", int(part["agg_counts"][l])),
            (f"coalition_{l}_reward", part["rewards"][l]),
        ]
    return out


def summarize(rows: Sequence[tuple]) -> list[tuple]:
    """Per (axis value, rule, metric) mean and 95% CI over converged trials only."""
    converged: dict[tuple, dict[str, bool]] = {}
    values: dict[tuple, list[tuple[str, float]]] = {}
    order = []
    for sc, axis, av, rule, trial, metric, value in rows:
        key = (sc, axis, av, rule)
        if metric == "converged":
            converged.setdefault(key, {})[trial] = value == "1"
        mkey = key + (metric,)
        if mkey not in values:
            values[mkey] = []
            order.append(mkey)
        values[mkey].append((trial, float(value)))
    out = []
    for mkey in order:
        key, metric = mkey[:4], mkey[4]
        flags = converged.get(key, {})
        bad = sum(1 for ok in flags.values() if not ok)
        if metric in ("converged", "attempts", "accepted_switches"):
            kept = [v for _, v in values[mkey]]  # diagnostics cover every trial
        else:
            kept = [v for t, v in values[mkey] if flags.get(t, True)]
        n = len(kept)
        mean = math.fsum(kept) / n if n else math.nan
        if n > 1:
            var = math.fsum((v - mean) ** 2 for v in kept) / (n - 1)
            ci = Z95 * math.sqrt(var / n)
        else:
            ci = math.nan
        out.append(key + (metric, repr(mean), repr(ci), str(n), str(bad)))
    return out


# --- emission ----------------------------------------------------------------


def _csv_bytes(header: Sequence[str], rows: Iterable[Sequence[str]]) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue().encode()


def _write_atomic(path: Path, data: bytes) -> None:
    _commit(_stage({path: data}))


def _stage(payloads: dict[Path, bytes]) -> list[tuple[str, Path]]:
    """Write every payload to a temporary sibling; on any failure remove them all."""
    staged: list[tuple[str, Path]] = []
    try:
        for path, data in payloads.items():
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
            staged.append((tmp, path))
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
    except BaseException:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)
        raise
    return staged


def _commit(staged: list[tuple[str, Path]]) -> None:
    done: list[Path] = []
    try:
        for tmp, path in staged:
            os.replace(tmp, path)
            done.append(path)
    except BaseException:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)
        for path in done:
            path.unlink(missing_ok=True)
        raise


def emit(result: ExperimentResult, out_dir, fmt: str = "csv") -> dict[str, Path]:
    """Write the trial CSV, the summary CSV and the manifest; returns their paths.

    Everything is serialized in memory and staged to temporary files before
    any output is renamed into place, so a failure leaves no partial output.
    """
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown format {fmt!r}")
    if not result.reports:
        raise ValueError("nothing to emit: experiment produced no trials")
    out = Path(out_dir)
    name = result.spec.scenario.value
    payloads: dict[str, bytes] = {}
    rows = result.rows()
    if fmt == "csv":
        payloads[f"{name}.csv"] = _csv_bytes(CSV_COLUMNS, rows)
        payloads[f"{name}_summary.csv"] = _csv_bytes(SUMMARY_COLUMNS, summarize(rows))
    else:
        payloads[f"{name}.json"] = json.dumps([dict(zip(CSV_COLUMNS, r)) for r in rows], indent=1).encode()
        payloads[f"{name}_summary.json"] = json.dumps(
            [dict(zip(SUMMARY_COLUMNS, r)) for r in summarize(rows)], indent=1).encode()
    manifest = {
        "version": version_string(),
        "spec": result.spec.to_dict(),
        "seed": result.spec.seed,
        "files": {fname: hashlib.sha256(data).hexdigest() for fname, data in sorted(payloads.items())},
        "instances": sorted({r.instance_digest for r in result.reports}),
        "nonconvergence_fraction": result.nonconvergence_fraction(),
        "wall_time_s": round(result.wall_time, 3),
    }
    payloads["manifest.json"] = (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode()
    created = [p for p in (out, *out.parents) if not p.exists()]
    out.mkdir(parents=True, exist_ok=True)
    paths = {fname: out / fname for fname in payloads}
    try:
        if not os.access(out, os.W_OK):
            raise PermissionError(f"output directory {out} is not writable")
        _commit(_stage({paths[fname]: data for fname, data in payloads.items()}))
    except BaseException:
        for p in created:  # innermost first
            try:
                p.rmdir()
            except OSError:
                break
        raise
    return paths


def read_rows(path) -> list[tuple]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header {header}")
        return [tuple(r) for r in reader]


def version_string() -> str:
    """git-describe style: package version, plus the short commit when run from a checkout."""
    head = Path(__file__).resolve().parents[2] / ".git" / "HEAD"
    try:
        ref = head.read_text().strip()
        if ref.startswith("ref: "):
            ref = (head.parent / ref[5:]).read_text().strip()
        return f"v{__version__}-g{ref[:7]}"
    except OSError:
        return f"v{__version__}"
