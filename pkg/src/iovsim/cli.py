"""``iovsim`` command line.

Exit codes: 0 success, 1 an expectation or trace check failed, 2 bad usage or
an unreadable/invalid scenario or trace file.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from .scenario import (
    ScenarioError,
    bundled_scenarios,
    load_scenario,
    read_trace,
    run_scenario,
    verify_trace,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
U64_MAX = 2**64 - 1


def _u64(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value <= U64_MAX:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return value


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def default_out() -> Path:
    return Path(os.environ.get("IOVSIM_OUT") or "iovsim-out")


def _resolve(name: str) -> Path:
    path = Path(name)
    if path.exists():
        return path
    bundled = bundled_scenarios()
    if name in bundled:
        return bundled[name]
    return path  # load_scenario reports the missing file


def _run_one(args: tuple[str, Optional[int], str]) -> tuple[str, bool, list[str]]:
    path, seed, out = args
    sc = load_scenario(path)
    result = run_scenario(sc, seed=seed, out_dir=Path(out) / sc.name)
    lines = []
    for exp, ok in result.expectations:
        lines.append(f"  {'PASS' if ok else 'FAIL'} {exp.metric} {exp.op} {exp.value} (got {result.metrics[exp.metric]})")
    v = result.verdict
    lines.append(f"  {'PASS' if v.ok else 'FAIL'} trace verify ({v.stats['records']} records)")
    lines.extend(f"    {msg}" for msg in v.failures)
    return sc.name, result.passed, lines


def _run_many(paths: Sequence[str], seed: Optional[int], out: Path, jobs: int) -> int:
    try:
        for p in paths:
            load_scenario(p)  # fail fast on parse/validation errors
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    work = [(p, seed, str(out)) for p in paths]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, work))
    else:
        results = [_run_one(w) for w in work]
    failed = 0
    for name, ok, lines in results:
        print(f"{'PASS' if ok else 'FAIL'} {name} -> {out / name}")
        for line in lines:
            print(line)
        failed += not ok
    return EXIT_FAIL if failed else EXIT_OK


def cmd_run(ns: argparse.Namespace) -> int:
    paths = [str(_resolve(s)) for s in ns.scenario]
    return _run_many(paths, ns.seed, Path(ns.out) if ns.out else default_out(), ns.jobs)


def cmd_suite(ns: argparse.Namespace) -> int:
    paths = [str(p) for p in bundled_scenarios().values()]
    return _run_many(paths, None, Path(ns.out) if ns.out else default_out(), ns.jobs)


def cmd_verify(ns: argparse.Namespace) -> int:
    try:
        records = read_trace(ns.trace)
    except (OSError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    report = verify_trace(records)
    stats = " ".join(f"{k}={v}" for k, v in report.stats.items())
    print(f"{'PASS' if report.ok else 'FAIL'} {ns.trace} {stats}")
    for msg in report.failures:
        print(f"  {msg}")
    return EXIT_OK if report.ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iovsim", description="Deterministic IoV identity and consensus simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one or more scenarios")
    run.add_argument("--scenario", action="append", required=True, help="scenario file or bundled name (repeatable)")
    run.add_argument("--seed", type=_u64, help="override the scenario seed")
    run.add_argument("--out", help="output directory (default: $IOVSIM_OUT or ./iovsim-out)")
    run.add_argument("--jobs", type=_positive, default=1, help="run scenarios in parallel processes")
    run.set_defaults(func=cmd_run)

    verify = sub.add_parser("verify", help="check a trace file")
    verify.add_argument("--trace", required=True)
    verify.set_defaults(func=cmd_verify)

    suite = sub.add_parser("suite", help="run every bundled scenario")
    suite.add_argument("--out", help="output directory (default: $IOVSIM_OUT or ./iovsim-out)")
    suite.add_argument("--jobs", type=_positive, default=1)
    suite.set_defaults(func=cmd_suite)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    return ns.func(ns)


if __name__ == "__main__":
    sys.exit(main())
