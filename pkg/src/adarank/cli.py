"""Command-line entry point: ``adarank <verb> [options]``.

Verbs: ``gen-task``, ``run``, ``export-heatmap``, ``export-orth``, ``summarize``.
Errors print one line ``error: <ErrorType>: <message>`` to stderr and exit
non-zero (2 for configuration problems, 1 otherwise).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import AdaRankError, ConfigurationError
from .experiments import (ExperimentPlan, _write, export_orth_trace, export_rank_heatmap, load_config,
                          parse_config, read_records, run_plan, summarize, summary_csv, write_task)
from .tasks import gen_task
from .trainer import Mode


def _plan(args) -> ExperimentPlan:
    plan = load_config(args.config) if args.config else parse_config({})
    if args.seed is not None:
        plan.task = dataclasses.replace(plan.task, seed=args.seed)
        for r in plan.runs:
            r.config = r.config.replace(seed=args.seed)
    if args.mode is not None:
        mode = Mode.parse(args.mode)
        base = plan.runs[0].config
        cfg = base.replace(mode=mode, gamma=0.0 if mode is Mode.ADALORA_NO_ORTH else base.gamma)
        plan.runs = [type(plan.runs[0])(mode.value, cfg)]
    if args.budget is not None:
        for r in plan.runs:
            sched = r.config.schedule
            b0 = max(sched.b0, args.budget)
            r.config = r.config.replace(schedule=dataclasses.replace(sched, bT=args.budget, b0=b0))
    if args.out is not None:
        plan.output_dir = args.out
    return plan


def cmd_gen_task(args) -> None:
    plan = _plan(args)
    task = gen_task(plan.task)
    write_task(task, args.out or plan.output_dir)


def cmd_run(args) -> None:
    plan = _plan(args)
    rows = run_plan(plan, jobs=args.jobs)
    for row in rows:
        print(f"{row['label']}: mean test loss {row['mean_test_loss']!r} over {row['runs'] - row['aborted']} runs")


def _run_dirs(root: Path):
    dirs = sorted({p.parent for p in root.rglob("checkpoint_final.json")})
    if not dirs:
        raise AdaRankError(f"no run artifacts under {root}")
    return dirs


def cmd_export_heatmap(args) -> None:
    root = Path(args.out)
    for d in _run_dirs(root):
        with open(d / "checkpoint_final.json", encoding="utf-8") as fh:
            ckpt = json.load(fh)
        _write(d / "rank_heatmap.csv", export_rank_heatmap(ckpt))


def cmd_export_orth(args) -> None:
    root = Path(args.out)
    for d in _run_dirs(root):
        if not (d / "penalties.npy").exists():
            raise AdaRankError(f"{d}: run has no orthogonality penalties (not an SVD mode)")
        vals = np.load(d / "penalties.npy")
        ids = np.load(d / "penalty_ids.npy")
        _write(d / "orth_trace.csv", export_orth_trace((ids, vals)))


def cmd_summarize(args) -> None:
    root = Path(args.out)
    records = read_records(root)
    if not records:
        raise AdaRankError(f"no result.json files under {root}")
    _write(root / "summary.csv", summary_csv(summarize(records)))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adarank", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    for name, fn in (("gen-task", cmd_gen_task), ("run", cmd_run), ("export-heatmap", cmd_export_heatmap),
                     ("export-orth", cmd_export_orth), ("summarize", cmd_summarize)):
        p = sub.add_parser(name)
        p.set_defaults(func=fn)
        p.add_argument("--out", help="output directory (run directory for exports)")
        if name in ("gen-task", "run"):
            p.add_argument("--config", help="YAML plan file with dotted keys")
            p.add_argument("--seed", type=int)
            p.add_argument("--mode", help="run a single mode instead of the plan's list")
            p.add_argument("--budget", type=int, help="final budget bT for every run")
        if name == "run":
            p.add_argument("--jobs", type=int, default=1, help="worker processes")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verb in ("export-heatmap", "export-orth", "summarize") and not args.out:
        parser.error(f"{args.verb} needs --out")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigurationError as exc:
        print(f"error: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return 2
    except (AdaRankError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
