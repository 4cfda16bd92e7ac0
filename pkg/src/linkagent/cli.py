"""Command line entry point: run, compare, train and sweep."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import bench
from .learner import CheckpointError

LOG_ENV = "LINKAGENT_LOG"
SCENARIO_SUFFIXES = (".yaml", ".yml")


class UsageError(ValueError):
    pass


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def read_directive_feed(stream) -> list[tuple[float, str]]:
    """Parse ``<t_ms> <directive...>`` lines; blank lines and ``#`` comments are skipped."""
    events = []
    for lineno, line in enumerate(stream, 1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        head, _, rest = text.partition(" ")
        try:
            t_ms = float(head)
        except ValueError:
            raise UsageError(f"directive feed line {lineno}: expected '<t_ms> <directive>'") from None
        events.append((t_ms, rest.strip()))
    return events


def _merge_events(scenario: bench.Scenario, extra) -> bench.Scenario:
    if not extra:
        return scenario
    merged = sorted(list(scenario.events) + list(extra), key=lambda e: e[0])
    return scenario.with_(events=merged)


def cmd_run(args) -> int:
    scen = bench.Scenario.load(args.scenario)
    if args.seed is not None:
        scen = scen.with_(seed=args.seed)
    if args.controller:
        scen = scen.with_(controller=args.controller)
    if args.directives_stdin:
        scen = _merge_events(scen, read_directive_feed(sys.stdin))
    result = bench.run_scenario(scen, checkpoint=args.checkpoint, timing=args.timing)
    summary = result.summary
    if args.out:
        csv_path, json_path = bench.write_run(result, args.out)
        summary = {**summary, "csv": str(csv_path), "summary_json": str(json_path)}
    _emit(summary)
    return 0


def cmd_compare(args) -> int:
    a = bench.read_kpi_csv(args.csv_a)
    b = bench.read_kpi_csv(args.csv_b)
    _emit(bench.compare(a, b))
    return 0


def cmd_train(args) -> int:
    scen = bench.Scenario.load(args.scenario)
    report = bench.train(scen, steps=args.steps, out=args.out, seed=args.seed,
                         updates_per_step=args.updates_per_step)
    recent = report.losses[-1000:]
    _emit({"steps": report.steps, "updates": report.updates, "checkpoint": str(args.out),
           "final_loss": sum(recent) / len(recent) if recent else None,
           "ranker_accuracy": report.ranker_accuracy})
    return 0


def _sweep_one(job) -> dict:
    path, controller, checkpoint, out = job
    scen = bench.Scenario.load(path)
    if controller:
        scen = scen.with_(controller=controller)
    result = bench.run_scenario(scen, checkpoint=checkpoint, timing=False)
    row = {**result.summary, "file": str(path)}
    if out:
        row["csv"] = str(bench.write_run(result, out)[0])
    return row


def cmd_sweep(args) -> int:
    root = Path(args.directory)
    if not root.is_dir():
        raise UsageError(f"not a directory: {root}")
    files = sorted(p for p in root.iterdir() if p.suffix in SCENARIO_SUFFIXES)
    if not files:
        raise UsageError(f"no scenario files in {root}")
    controllers = args.controllers.split(",") if args.controllers else [None]
    jobs = [(p, c, args.checkpoint, args.out) for p in files for c in controllers]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    _emit(rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="linkagent", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one scenario and print its summary")
    r.add_argument("scenario")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help="directory for the KPI CSV and JSON summary")
    r.add_argument("--checkpoint", help="agent weights (defaults to the shipped checkpoint)")
    r.add_argument("--timing", action="store_true", help="record reactive-cycle wall-clock")
    r.add_argument("--controller", choices=("agent", "olla"), help="override the scenario's controller")
    r.add_argument("--directives-stdin", action="store_true",
                   help="read extra '<t_ms> <directive>' lines from standard input")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="compare two KPI CSVs (A relative to B)")
    c.add_argument("csv_a")
    c.add_argument("csv_b")
    c.set_defaults(func=cmd_compare)

    t = sub.add_parser("train", help="train the Q-network and ranker on a scenario")
    t.add_argument("scenario")
    t.add_argument("--steps", type=int, required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--updates-per-step", type=int, default=bench.TRAIN_UPDATES_PER_STEP)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="run every scenario file in a directory")
    s.add_argument("directory")
    s.add_argument("--out")
    s.add_argument("--checkpoint")
    s.add_argument("--controllers", help="comma list, e.g. agent,olla (default: per file)")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)
    return p


_ERRORS = (bench.InvalidScenario, bench.CheckpointMissing, bench.LengthMismatch, bench.NoSamples,
           CheckpointError, UsageError, FileNotFoundError)


def main(argv=None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _ERRORS as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
