"""Command-line interface: validate, allocate, run, run-batch, report, gen-data.

Exit codes: 0 success, 1 validation failure, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .allocation import AllocationError, items_from, solve_allocation
from .deviceflow.strategy import TimeInterval, strategy_from_dict
from .engine import stream
from .fl import DEFAULT_DIM, generate_synthetic_ctr, save_dataset
from .metrics import FidelityError, curve_fidelity, event_totals
from .model import SpecError, load_task_spec, validate_task_spec
from .resources import PoolError, ResourcePool, SchedulerError
from .runner import RunOptions, resolve_out_dir, run_batch
from .trace import audit_capacity, audit_conservation, dumps, fmt_float, load_traffic

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2


def _load(path: str):
    """(spec, problems) with parse errors reported as problems."""
    try:
        spec = load_task_spec(path)
    except SpecError as exc:
        return None, [str(exc)]
    except OSError as exc:
        return None, [f"cannot read {path}: {exc}"]
    return spec, validate_task_spec(spec, None, Path(path).parent)


def _print_problems(path: str, problems: list[str]) -> None:
    for p in problems:
        print(f"{path}: {p}", file=sys.stderr)


def cmd_validate(args) -> int:
    spec, problems = _load(args.spec)
    if problems:
        _print_problems(args.spec, problems)
        return EXIT_INVALID
    print(f"{args.spec}: ok (task {spec.task_id})")
    return EXIT_OK


def cmd_allocate(args) -> int:
    spec, problems = _load(args.spec)
    if problems:
        _print_problems(args.spec, problems)
        return EXIT_INVALID
    try:
        plan = solve_allocation(items_from(spec.grades, spec.demand))
    except AllocationError as exc:
        print(f"allocation failed: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(f"{'grade':<12}{'N':>8}{'q':>6}{'logical x':>12}{'phones':>10}")
    for g in spec.grades:
        d = spec.demand[g.grade_id]
        x = plan.logical(g.grade_id)
        print(f"{g.grade_id:<12}{d.N:>8}{d.q:>6}{x:>12}{d.N - d.q - x:>10}")
    print(f"T_l = {fmt_float(plan.t_logical / 1000)} s, T_p = {fmt_float(plan.t_device / 1000)} s, "
          f"T = {fmt_float(plan.t_total / 1000)} s")
    print(json.dumps(plan.to_dict(), sort_keys=True))
    return EXIT_OK


def _summary(report: dict) -> str:
    c = report["counts"]
    line = (f"task {report['task_id']}: {report['status']}, rounds {report['rounds_completed']}, "
            f"emitted {c['emitted']}, delivered {c['delivered']}, dropped {c['dropped']}, "
            f"residual {c['residual']}, aggregations {report['aggregations']}")
    if report.get("final") and report["final"].get("test_acc") is not None:
        line += f", test accuracy {fmt_float(report['final']['test_acc'])}"
    return line


def _execute(specs, pool, out: Path, env: str | None, window, batch: bool, base_dir) -> int:
    options = RunOptions(window_ms=None if window is None else int(round(window * 1000)))
    result = run_batch(specs, pool, options, base_dir)
    failed = False
    for spec in specs:
        run = result.runs.get(spec.task_id)
        if run is None:
            print(f"task {spec.task_id}: never scheduled", file=sys.stderr)
            failed = True
            continue
        report = run.write(out / spec.task_id if batch else out, env)
        print(_summary(report))
        failed |= run.status != "completed"
    if batch:
        summary = {"admissions": [{"t_ms": t, "task_id": tid} for t, tid in result.admissions],
                   "tasks": {tid: r.status for tid, r in sorted(result.runs.items())}}
        (out / "batch.json").write_text(dumps(summary), encoding="utf-8")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_run(args) -> int:
    spec, problems = _load(args.spec)
    if problems:
        _print_problems(args.spec, problems)
        return EXIT_INVALID
    if args.seed is not None:
        from dataclasses import replace
        spec = replace(spec, seed=args.seed)
    out, env = resolve_out_dir(args.out)
    return _execute([spec], ResourcePool.for_spec(spec), out, env, args.window, False,
                    Path(args.spec).parent)


def cmd_run_batch(args) -> int:
    specs = []
    bad = False
    for path in args.specs:
        spec, problems = _load(path)
        if problems:
            _print_problems(path, problems)
            bad = True
        specs.append(spec)
    if bad:
        return EXIT_INVALID
    try:
        pool = ResourcePool.load(args.pool)
    except (OSError, ValueError, PoolError) as exc:
        print(f"bad pool file: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out, env = resolve_out_dir(args.out)
    try:
        return _execute(specs, pool, out, env, args.window, True, Path(args.specs[0]).parent)
    except SchedulerError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID


def _report_dirs(root: Path) -> list[Path]:
    if (root / "report.json").is_file():
        return [root]
    return sorted(p.parent for p in root.glob("*/report.json"))


def cmd_report(args) -> int:
    root = Path(args.dir)
    dirs = _report_dirs(root)
    if not dirs:
        print(f"no report.json under {root}", file=sys.stderr)
        return EXIT_RUNTIME
    bad = False
    for d in dirs:
        report = json.loads((d / "report.json").read_text(encoding="utf-8"))
        rows = load_traffic(d / report["traces"]["traffic"])
        print(_summary(report))
        totals = event_totals(rows).get(report["task_id"], {})
        print("  events: " + ", ".join(f"{k}={v}" for k, v in totals.items()))
        strategy = strategy_from_dict(report["dispatch_strategy"])
        problems = audit_capacity(rows, strategy.capacity_per_sec)
        residual = {(report["task_id"], int(k)): v for k, v in report["residual_by_round"].items()}
        problems += audit_conservation(rows, residual)
        for p in problems:
            print(f"  audit: {p}")
        bad |= bool(problems)
        if isinstance(strategy, TimeInterval):
            for rnd, plan in sorted(report["dispatch_plans"].items(), key=lambda kv: int(kv[0])):
                origin = plan["base_ms"] + strategy.start
                try:
                    r = curve_fidelity(strategy, rows, report["task_id"], int(rnd), origin,
                                       plan["step_ms"])
                    print(f"  round {rnd}: curve fidelity {fmt_float(r)} (step {plan['step_ms']} ms)")
                except FidelityError as exc:
                    print(f"  round {rnd}: curve fidelity undefined ({exc})")
    return EXIT_RUNTIME if bad else EXIT_OK


def cmd_gen_data(args) -> int:
    ds = generate_synthetic_ctr(args.rows, args.dim, stream(args.seed, "synthetic"),
                                n_fields=args.fields, positive_rate=args.rate)
    save_dataset(ds, args.out)
    print(f"wrote {args.rows} rows x {args.dim} features to {args.out} "
          f"(positive rate {fmt_float(ds.positive_fraction)})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edgesim", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", help="check a task spec")
    s.add_argument("spec")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("allocate", help="print the optimal logical/phone split")
    s.add_argument("spec")
    s.set_defaults(func=cmd_allocate)

    s = sub.add_parser("run", help="run one task on exactly its declared resources")
    s.add_argument("spec")
    s.add_argument("--out", help="output directory (or set EDGESIM_OUT)")
    s.add_argument("--seed", type=int, help="override the spec's seed")
    s.add_argument("--window", type=float, help="stop after this many virtual seconds")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("run-batch", help="queue several tasks on a shared pool")
    s.add_argument("specs", nargs="+")
    s.add_argument("--pool", required=True, help='JSON {"grades": {id: {"bundles", "phones"}}}')
    s.add_argument("--out", help="output directory (or set EDGESIM_OUT)")
    s.add_argument("--window", type=float, help="stop each task after this many virtual seconds")
    s.set_defaults(func=cmd_run_batch)

    s = sub.add_parser("report", help="summarize and audit the traces of a run")
    s.add_argument("dir")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("gen-data", help="write a synthetic CTR dataset (.npz)")
    s.add_argument("--rows", type=int, required=True)
    s.add_argument("--dim", type=int, default=DEFAULT_DIM)
    s.add_argument("--fields", type=int, default=8)
    s.add_argument("--rate", type=float, default=0.25)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SpecError, SchedulerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


cli_main = main

if __name__ == "__main__":
    sys.exit(main())
