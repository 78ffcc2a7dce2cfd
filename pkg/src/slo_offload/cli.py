"""Command line entry point: ``slo-offload {analyze,simulate,coordinate,compare}``."""

from __future__ import annotations

import argparse
import json
import sys
import time
from typing import Optional, Sequence

from .analyzer import RecordError, build_record, read_record, write_record
from .coordinator import CoordinatorError
from .harness import (
    POLICIES,
    NaiveInfeasible,
    ScenarioError,
    any_violation,
    build_report,
    compare_rows,
    dump_json,
    load_scenario,
    rows_to_csv,
    run_policy,
    trace_events,
    with_prefetch,
)
from .interval import INFEASIBLE
from .profiles import PHASES, ProfileError, read_profile_file

PREFETCH_FLAGS = {"interval-start": "interval_start", "eager": "eager", "one-ahead": "one_ahead"}


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("grid list is empty")
    return values


def _write(text: str, path: Optional[str]) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def _prefetch(args) -> Optional[str]:
    return PREFETCH_FLAGS[args.prefetch] if args.prefetch else None


def cmd_analyze(args) -> int:
    doc = read_profile_file(args.profile)
    t0 = time.perf_counter()
    record = build_record(doc.profile, doc.model, doc.gpu, args.slo, args.batch, args.seq,
                          PREFETCH_FLAGS[args.prefetch or "interval-start"], args.kv_offload,
                          bandwidth=args.bandwidth, phases=args.phases)
    elapsed = time.perf_counter() - t0
    write_record(args.out, record)
    infeasible = sum(1 for t in record.entries.values() for i in t.values() if i is INFEASIBLE)
    keys = len(record.meta.slo_ms) * len(record.meta.batch) * len(record.meta.seq_len)
    print(f"grid {len(record.meta.slo_ms)}x{len(record.meta.batch)}x{len(record.meta.seq_len)} = {keys} keys "
          f"per phase, {len(record)} entries ({infeasible} infeasible), "
          f"{record.simulations} simulations in {elapsed:.2f} s -> {args.out}", file=sys.stderr)
    return 0


def _run_report(args, policy: str, with_decisions: bool) -> int:
    scenario = with_prefetch(load_scenario(args.scenario), _prefetch(args))
    record = read_record(args.record) if getattr(args, "record", None) else None
    run = run_policy(scenario, policy, record)
    report = build_report(scenario, policy, run, with_decisions)
    _write(dump_json(report), args.out)
    if args.trace:
        _write(json.dumps(trace_events(run), indent=1) + "\n", args.trace)
    return 1 if any_violation(report) else 0


def cmd_simulate(args) -> int:
    return _run_report(args, args.policy, args.policy == "select-n")


def cmd_coordinate(args) -> int:
    return _run_report(args, "select-n", True)


def cmd_compare(args) -> int:
    scenario = with_prefetch(load_scenario(args.scenario), _prefetch(args))
    record = read_record(args.record) if args.record else None
    _write(rows_to_csv(compare_rows(scenario, record)), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slo-offload", description="SLO-aware layer offloading simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="build a performance record from a profile")
    p.add_argument("--profile", required=True)
    p.add_argument("--slo", type=_int_list, required=True, help="SLO buckets in ms, e.g. 20,40")
    p.add_argument("--batch", type=_int_list, required=True)
    p.add_argument("--seq", type=_int_list, required=True)
    p.add_argument("--bandwidth", type=float, required=True, help="uncontended bus bytes/s")
    p.add_argument("--prefetch", choices=sorted(PREFETCH_FLAGS))
    p.add_argument("--kv-offload", action="store_true")
    p.add_argument("--phases", nargs="+", choices=PHASES, default=list(PHASES))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    for name, func, helptext in (("simulate", cmd_simulate, "serve a scenario with one policy"),
                                 ("coordinate", cmd_coordinate, "serve a scenario with the bus coordinator")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--scenario", required=True)
        if name == "simulate":
            p.add_argument("--policy", choices=POLICIES, default="select-n")
        p.add_argument("--prefetch", choices=sorted(PREFETCH_FLAGS))
        p.add_argument("--record", help="prebuilt uncontended record to use instead of building one")
        p.add_argument("--trace", help="write the event timeline here")
        p.add_argument("--out", help="report path (default stdout)")
        p.set_defaults(func=func)

    p = sub.add_parser("compare", help="CSV table of all policies on one scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--prefetch", choices=sorted(PREFETCH_FLAGS))
    p.add_argument("--record")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ProfileError, RecordError, ScenarioError, CoordinatorError, NaiveInfeasible, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
