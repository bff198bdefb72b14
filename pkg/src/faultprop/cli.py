"""Command-line front end: ``faultprop run|explore|bench|list``.

Exit codes: 0 when the verdict meets the scenario's expectations, 1 when it
does not or the scenario cannot run in the chosen mode, 2 on unreadable or
malformed input.
"""

from __future__ import annotations

import argparse
import csv
import json
import statistics
import sys
import time
from pathlib import Path
from typing import Sequence, TextIO

from . import harness

BENCH_COLUMNS = ("iter", "mode", "ranks", "sim_steps", "messages", "err_sends", "wall_ns")


class InputError(Exception):
    pass


def load_scenario(ref: str) -> harness.Scenario:
    builtins = harness.builtin_scenarios()
    if ref in builtins and not Path(ref).exists():
        return builtins[ref]
    try:
        text = Path(ref).read_text()
    except OSError as exc:
        raise InputError(f"cannot read scenario {ref!r}: {exc.strerror or exc}") from None
    try:
        return harness.parse_scenario(text, name=Path(ref).stem)
    except harness.ScenarioError as exc:
        raise InputError(f"{ref}: {exc}") from None


def _pick_mode(s: harness.Scenario, mode: str | None) -> str:
    if mode is not None:
        return mode
    return "black-channel" if s.mode == "both" else s.mode


def cmd_run(args: argparse.Namespace, out: TextIO, err: TextIO) -> int:
    s = load_scenario(args.scenario)
    mode = _pick_mode(s, args.mode)
    try:
        run = harness.run_scenario_full(s, seed=args.seed, mode=mode)
    except harness.UnsupportedScenario as exc:
        print(f"error: {exc}", file=err)
        return 1
    if args.trace:
        Path(args.trace).write_text(run.result.trace.dumps())
    mismatches = harness.check_expectations(run.verdict, s.expect)
    record = {"scenario": s.name, "mode": mode, "seed": args.seed, **run.verdict.as_dict()}
    record["expect"] = "fail" if mismatches else ("pass" if s.expect else "none")
    print(json.dumps(record, sort_keys=True), file=out)
    for m in mismatches:
        print(f"mismatch: {m}", file=err)
    return 1 if mismatches else 0


def cmd_explore(args: argparse.Namespace, out: TextIO, err: TextIO) -> int:
    s = load_scenario(args.scenario)
    mode = _pick_mode(s, args.mode)
    try:
        res = harness.explore(s, budget=args.budget, mode=mode, max_executions=args.max_executions)
    except harness.UnsupportedScenario as exc:
        print(f"error: {exc}", file=err)
        return 1
    failed = 0
    for v in sorted(res.verdicts, key=lambda v: v.to_json()):
        mismatches = harness.check_expectations(v, s.expect)
        failed += bool(mismatches)
        rec = v.as_dict()
        del rec["steps"]
        rec["expect"] = "fail" if mismatches else ("pass" if s.expect else "none")
        print(json.dumps(rec, sort_keys=True), file=out)
    summary = {
        "scenario": s.name,
        "mode": mode,
        "executions": res.executions,
        "verdicts": len(res.verdicts),
        "partial": res.partial,
        "failing": failed,
    }
    print(json.dumps(summary, sort_keys=True), file=out)
    if res.partial:
        print("warning: exploration budget exhausted; coverage is partial", file=err)
    return 1 if failed else 0


def bench_rows(ranks: int, iters: int, mode: str, seed: int = 0) -> list[dict[str, object]]:
    """One row per iteration: duplicate, signal from rank 0, resolve, tear down."""
    scenario = harness.single_signaller(ranks, code=1)
    rows = []
    for i in range(iters):
        t0 = time.perf_counter_ns()
        run = harness.run_scenario_full(scenario, seed=seed + i, mode=mode)
        wall = time.perf_counter_ns() - t0
        v = run.verdict
        if v.deadlocked or set(v.outcomes) != {"propagated"}:
            raise RuntimeError(f"bench iteration {i} did not propagate: {v.to_json()}")
        rows.append({
            "iter": i,
            "mode": mode,
            "ranks": ranks,
            "sim_steps": v.steps,
            "messages": sum(c for _, c in v.messages),
            "err_sends": v.err_sends,
            "wall_ns": wall,
        })
    return rows


def summary_row(rows: Sequence[dict[str, object]]) -> dict[str, object]:
    """Numeric columns as ``min/median/max`` over the data rows."""
    out: dict[str, object] = {"iter": "summary", "mode": rows[0]["mode"], "ranks": rows[0]["ranks"]}
    for col in BENCH_COLUMNS[3:]:
        vals = [int(r[col]) for r in rows]  # type: ignore[arg-type]
        med = statistics.median(vals)
        med_s = str(int(med)) if med == int(med) else f"{med:.1f}"
        out[col] = f"{min(vals)}/{med_s}/{max(vals)}"
    return out


def cmd_bench(args: argparse.Namespace, out: TextIO, err: TextIO) -> int:
    if args.ranks < 2:
        raise InputError("--ranks must be at least 2")
    if args.iters < 1:
        raise InputError("--iters must be at least 1")
    rows = bench_rows(args.ranks, args.iters, args.mode, args.seed)
    writer = csv.DictWriter(out, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    writer.writerow(summary_row(rows))
    return 0


def cmd_list(args: argparse.Namespace, out: TextIO, err: TextIO) -> int:
    for name, s in harness.builtin_scenarios().items():
        print(f"{name}\tranks={s.n}\tmode={s.mode}", file=out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="faultprop", description="Simulate error propagation between ranks.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario under one seeded schedule")
    run.add_argument("scenario", help="scenario file or built-in name (see 'list')")
    run.add_argument("--mode", choices=harness.MODES)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--trace", metavar="PATH", help="write the transport trace here")
    run.set_defaults(func=cmd_run)

    ex = sub.add_parser("explore", help="explore the schedules of a scenario")
    ex.add_argument("scenario")
    ex.add_argument("--mode", choices=harness.MODES)
    ex.add_argument("--budget", type=int, default=5_000, help="max transitions per schedule")
    ex.add_argument("--max-executions", type=int, default=20_000)
    ex.set_defaults(func=cmd_explore)

    bench = sub.add_parser("bench", help="propagation micro-benchmark, CSV on stdout")
    bench.add_argument("--ranks", type=int, default=2)
    bench.add_argument("--iters", type=int, default=1000)
    bench.add_argument("--mode", choices=harness.MODES, default="black-channel")
    bench.add_argument("--seed", type=int, default=0)
    bench.set_defaults(func=cmd_bench)

    ls = sub.add_parser("list", help="list built-in scenarios")
    ls.set_defaults(func=cmd_list)
    return p


def main(argv: Sequence[str] | None = None, out: TextIO | None = None, err: TextIO | None = None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args, out, err)
    except InputError as exc:
        print(f"error: {exc}", file=err)
        return 2


if __name__ == "__main__":
    sys.exit(main())
