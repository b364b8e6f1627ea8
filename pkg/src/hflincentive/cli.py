"""Command line entry point: ``hflincentive {gen,run,replay,verify}``.

Exit codes: 0 success, 1 validation error, 2 too many non-converged runs
(or, for ``verify``, a failed invariant).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .coalition import (
    CoalitionPartition,
    FormationConfig,
    PreferenceRule,
    SwitchRecord,
    is_stable,
    potential_value,
    run_formation,
)
from .experiment import ExperimentSpec, emit, run_experiment, _write_atomic
from .instances import generate_instance
from .model import NetworkInstance
from .utility import total_utility

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED = 0, 1, 2

log = logging.getLogger("hflincentive")


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _param(text: str):
    key, sep, raw = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key, json.loads(raw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hflincentive", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="sample one instance and write it as JSON")
    gen.add_argument("--seed", type=_seed, default=0)
    gen.add_argument("--out", type=Path, required=True, help="instance JSON file")
    gen.add_argument("--param", type=_param, action="append", default=[], metavar="KEY=JSON",
                     help="override an instance range, e.g. n_devices=18 or cloud_interval=[15,25]")

    run = sub.add_parser("run", help="run a seeded multi-trial experiment")
    run.add_argument("--spec", type=Path, help="experiment spec JSON (defaults to the 200-trial comparison)")
    run.add_argument("--scenario", help="override the scenario given by --spec")
    run.add_argument("--seed", type=_seed)
    run.add_argument("--trials", type=int)
    run.add_argument("--rules", help="comma-separated: altruistic,selfish,pareto,bandwidth_only")
    run.add_argument("--out", type=Path, required=True, help="output directory")
    run.add_argument("--format", choices=("csv", "json"), default="csv")
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--trace-gp", action="store_true", help="log every gradient-projection iteration")

    replay = sub.add_parser("replay", help="run the formation loop on a saved instance")
    replay.add_argument("--instance", type=Path, required=True)
    replay.add_argument("--seed", type=_seed, default=0)
    replay.add_argument("--rules", default="altruistic,selfish,pareto,bandwidth_only")
    replay.add_argument("--out", type=Path, required=True, help="trial directory")
    replay.add_argument("--max-attempts", type=int, default=10_000)
    replay.add_argument("--trace-gp", action="store_true")

    verify = sub.add_parser("verify", help="check invariants of a replayed trial directory")
    verify.add_argument("trial", type=Path)
    verify.add_argument("--skip-stability", action="store_true", help="skip the exhaustive deviation check")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "trace_gp", False):
        logging.getLogger("hflincentive.bandwidth").setLevel(logging.DEBUG)
        logging.getLogger().setLevel(logging.DEBUG)
    try:
        return {"gen": cmd_gen, "run": cmd_run, "replay": cmd_replay, "verify": cmd_verify}[args.command](args)
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def cmd_gen(args) -> int:
    inst = generate_instance(dict(args.param), seed=args.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    _write_atomic(args.out, inst.to_json().encode())
    print(f"wrote {args.out} (digest {inst.digest()[:16]})")
    return EXIT_OK


def cmd_run(args) -> int:
    doc = json.loads(args.spec.read_text()) if args.spec else {}
    for key in ("scenario", "seed", "trials", "rules"):
        value = getattr(args, key)
        if value is not None:
            doc[key] = value
    spec = ExperimentSpec.from_dict(doc)
    if args.workers < 1:
        raise ValueError("--workers must be >= 1")
    result = run_experiment(spec, workers=args.workers, trace_gp=args.trace_gp)
    paths = emit(result, args.out, args.format)
    frac = result.nonconvergence_fraction()
    for path in paths.values():
        print(path)
    print(f"{len(result.reports)} trials in {result.wall_time:.1f}s; non-converged fraction {frac:.4f}")
    if frac > spec.nonconvergence_threshold:
        print(f"non-convergence {frac:.2%} exceeds threshold {spec.nonconvergence_threshold:.2%}", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def _rules(text: str) -> list[PreferenceRule]:
    rules = [PreferenceRule(r.strip()) for r in text.split(",") if r.strip()]
    if not rules:
        raise ValueError("at least one rule is required")
    return rules


def cmd_replay(args) -> int:
    inst = NetworkInstance.from_json(args.instance.read_text())
    rules = _rules(args.rules)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    start_rng, form_rng_seed = np.random.SeedSequence(args.seed).spawn(2)
    assignment = np.random.default_rng(start_rng).integers(0, inst.n_edges, size=inst.n_devices)
    config = FormationConfig(max_attempts=args.max_attempts)
    _write_atomic(out / "instance.json", inst.to_json().encode())
    summary = {"seed": args.seed, "instance_digest": inst.digest(), "rules": {}}
    any_bad = False
    for rule in rules:
        res = run_formation(inst, rule, config, rng=np.random.default_rng(form_rng_seed), initial_assignment=assignment)
        lines = [",".join(SwitchRecord.CSV_HEADER)]
        lines += [",".join(str(v) for v in r.csv_row()) for r in res.records]
        _write_atomic(out / f"switches_{rule.value}.csv", ("\n".join(lines) + "\n").encode())
        doc = {"rule": rule.value, "converged": res.converged, "attempts": res.attempts,
               "initial": res.initial_partition.to_dict(), "final": res.partition.to_dict(),
               "total_utility": res.total_utility, "cloud_utility": res.cloud_utility,
               "edge_utilities": [float(v) for v in res.edge_utilities]}
        _write_atomic(out / f"partition_{rule.value}.json", json.dumps(doc, indent=1).encode())
        summary["rules"][rule.value] = {"converged": res.converged, "attempts": res.attempts,
                                        "accepted": res.accepted, "total_utility": res.total_utility}
        any_bad |= not res.converged
        print(f"{rule.value:15s} converged={res.converged} attempts={res.attempts} "
              f"switches={res.accepted} total_utility={res.total_utility:.6f}")
    _write_atomic(out / "summary.json", json.dumps(summary, indent=1, sort_keys=True).encode())
    return EXIT_NONCONVERGED if any_bad else EXIT_OK


def cmd_verify(args) -> int:
    trial = args.trial
    inst = NetworkInstance.from_json((trial / "instance.json").read_text())
    files = sorted(trial.glob("partition_*.json"))
    if not files:
        raise FileNotFoundError(f"no partition_*.json files in {trial}")
    failures = []
    for path in files:
        doc = json.loads(path.read_text())
        rule = PreferenceRule(doc["rule"])
        part = CoalitionPartition.from_dict(doc["final"])
        checks = {}
        try:
            part.validate(inst.config.total_bandwidth)
            checks["partition valid"] = True
        except ValueError as exc:
            checks["partition valid"] = False
            log.error("%s: %s", rule.value, exc)
        psi = potential_value(inst, part)
        recomputed = total_utility(inst, part.assignment, part.agg_counts, part.bandwidth)
        checks["utility recomputable"] = math.isclose(psi, doc["total_utility"], rel_tol=1e-9, abs_tol=1e-9)
        checks["potential equals total utility"] = math.isclose(psi, recomputed, rel_tol=1e-9, abs_tol=1e-9)
        log_path = trial / f"switches_{rule.value}.csv"
        if log_path.exists():
            with open(log_path, newline="") as fh:
                rows = list(csv.DictReader(fh))
            replayed = np.array(doc["initial"]["assignment"])
            accepted = [r for r in rows if r["accepted"] == "1"]
            for r in accepted:
                replayed[int(r["device"])] = int(r["to"])
            checks["switch log reproduces partition"] = bool(np.array_equal(replayed, part.assignment))
            if rule is PreferenceRule.ALTRUISTIC:
                after = [float(r["psi_after"]) for r in accepted]
                before = [float(r["psi_before"]) for r in accepted]
                checks["potential strictly increasing"] = all(a > b for a, b in zip(after, before))
        if rule is not PreferenceRule.BANDWIDTH_ONLY and not args.skip_stability:
            stable, dev = is_stable(inst, part, rule)
            checks["stable"] = stable if doc["converged"] else True
            if not doc["converged"]:
                log.warning("%s did not converge; stability not expected (first deviation %s)", rule.value, dev)
        for name, ok in checks.items():
            print(f"{'PASS' if ok else 'FAIL'} {rule.value}: {name}")
            if not ok:
                failures.append((rule.value, name))
    return EXIT_OK if not failures else EXIT_NONCONVERGED


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
