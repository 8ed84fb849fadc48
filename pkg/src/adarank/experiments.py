"""Experiment plans, run artifacts and CSV exports."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import checkpoint
from .adapters import KINDS
from .allocator import BudgetSchedule
from .errors import AdaRankError, ConfigurationError, UnsupportedModeError
from .importance import ScoreVariant
from .tasks import Task, TaskSpec, gen_task
from .trainer import Mode, RunResult, TrainConfig, run

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "task_loss", "reg_loss", "total_loss", "budget", "active_triplets"] + \
    [f"rank_{k}" for k in KINDS]


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def metrics_csv(result: RunResult) -> str:
    adapters = result.model.adapters
    rows = []
    for rep in result.history:
        per_kind = {k: 0 for k in KINDS}
        for a, r in zip(adapters, rep.active_ranks):
            per_kind[a.kind] += r
        rows.append([rep.step, rep.task_loss, rep.reg_loss, rep.total_loss, rep.budget,
                     rep.active_triplets] + [per_kind[k] for k in KINDS])
    return _csv(METRIC_COLUMNS, rows)


def decisions_csv(result: RunResult) -> str:
    rows = [row for d in result.decisions for row in d.rows()]
    return _csv(["step", "matrix_id", "triplet_index", "action"], rows)


def rank_table(records) -> list[list[int]]:
    """Layer-by-kind table of active ranks from adapters or checkpoint records."""
    layers = 1 + max(r["layer"] if isinstance(r, dict) else r.layer for r in records)
    table = [[0] * len(KINDS) for _ in range(layers)]
    for r in records:
        rec = r if isinstance(r, dict) else checkpoint.adapter_record(r)
        table[rec["layer"]][KINDS.index(rec["kind"])] = int(sum(rec["mask"]))
    return table


def export_rank_heatmap(result) -> str:
    """CSV of final active rank per (layer, kind). ``result`` is a RunResult or a checkpoint dict."""
    if isinstance(result, RunResult):
        if not result.config.mode.uses_svd:
            raise UnsupportedModeError(f"rank heatmap needs an SVD mode, run used {result.config.mode.value}")
        records = [checkpoint.adapter_record(a) for a in result.model.adapters]
    else:
        records = result["adapters"]
        if any(r["type"] != "svd" for r in records):
            raise UnsupportedModeError("rank heatmap needs SVD adapters")
    table = rank_table(records)
    return _csv(["layer"] + list(KINDS), [[i] + row for i, row in enumerate(table)])


def penalty_array(result: RunResult) -> tuple[np.ndarray, np.ndarray]:
    """``(matrix_ids, values)`` with ``values[t, k] = (p_penalty, q_penalty)``."""
    ids = np.array(sorted(result.orth_trace[0]) if result.orth_trace else [], dtype=np.int64)
    vals = np.array([[step[k] for k in ids] for step in result.orth_trace], dtype=np.float64)
    return ids, vals.reshape(len(result.orth_trace), len(ids), 2)


def export_orth_trace(result) -> str:
    """CSV of ``(step, matrix_id, p_penalty, q_penalty)``; accepts a RunResult or ``(ids, values)``."""
    ids, vals = penalty_array(result) if isinstance(result, RunResult) else result
    rows = [(t, int(k), vals[t, j, 0], vals[t, j, 1]) for t in range(vals.shape[0]) for j, k in enumerate(ids)]
    return _csv(["step", "matrix_id", "p_penalty", "q_penalty"], rows)


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def save_run(result: RunResult, out: Path, task: Optional[Task] = None) -> dict:
    """Write every artifact of one run into ``out`` and return its summary record."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "metrics.csv", metrics_csv(result))
    _write(out / "decisions.csv", decisions_csv(result))
    checkpoint.save(result.init_checkpoint, out / "checkpoint_init.json")
    checkpoint.save(result.model, out / "checkpoint_final.json")
    ids, vals = penalty_array(result)
    if len(ids):
        _write(out / "orth_trace.csv", export_orth_trace((ids, vals)))
        with open(out / "penalties.npy", "wb") as fh:
            np.save(fh, vals)
        with open(out / "penalty_ids.npy", "wb") as fh:
            np.save(fh, ids)
    if result.config.mode.uses_svd:
        _write(out / "rank_heatmap.csv", export_rank_heatmap(result))
    summary = run_record(result, task)
    _write(out / "result.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


def run_record(result: RunResult, task: Optional[Task] = None) -> dict:
    cfg = result.config
    rec = {"mode": cfg.mode.value, "variant": cfg.variant.value, "seed": cfg.seed,
           "b0": cfg.schedule.b0, "bT": cfg.schedule.bT, "steps": len(result.history),
           "initial_rank": result.rank, "test_loss": result.test_loss,
           "final_task_loss": result.history[-1].task_loss if result.history else None,
           "final_active": result.final_active,
           "active_ranks": list(result.history[-1].active_ranks) if result.history else [],
           "aborted": result.aborted}
    if task is not None:
        rec["planted_ranks"] = list(task.planted_ranks)
    return rec


@dataclass
class RunSpec:
    label: str
    config: TrainConfig


@dataclass
class ExperimentPlan:
    task: TaskSpec
    runs: list
    repetitions: int = 1
    output_dir: str = "runs"

    def validate(self) -> "ExperimentPlan":
        if self.repetitions < 1:
            raise ConfigurationError("repetitions must be >= 1")
        if not self.runs:
            raise ConfigurationError("plan has no runs")
        budgets = {r.config.schedule.bT for r in self.runs}
        if len(budgets) > 1:
            raise ConfigurationError(f"compared runs must share one final budget, got {sorted(budgets)}")
        labels = [r.label for r in self.runs]
        if len(set(labels)) != len(labels):
            raise ConfigurationError(f"duplicate run labels {labels}")
        for r in self.runs:
            r.config.validate()
        return self


def _one(args):
    label, config, task_spec, out = args
    task = gen_task(task_spec)
    try:
        result = run(config, task)
    except AdaRankError as exc:
        log.warning("%s seed %d failed: %s", label, config.seed, exc)
        return {"label": label, "mode": config.mode.value, "variant": config.variant.value,
                "seed": config.seed, "bT": config.schedule.bT, "test_loss": float("nan"),
                "aborted": f"{type(exc).__name__}: {exc}"}
    rec = save_run(result, out, task)
    rec["label"] = label
    return rec


SUMMARY_COLUMNS = ["label", "mode", "variant", "bT", "runs", "aborted", "mean_test_loss", "test_losses"]


def summarize(records: list[dict]) -> list[dict]:
    """Aggregate per-run records into one row per label (mean over completed seeds)."""
    rows = {}
    for rec in records:
        row = rows.setdefault(rec["label"], {"label": rec["label"], "mode": rec["mode"],
                                             "variant": rec["variant"], "bT": rec["bT"],
                                             "runs": 0, "aborted": 0, "finals": []})
        row["runs"] += 1
        if rec.get("aborted"):
            row["aborted"] += 1
        else:
            row["finals"].append(float(rec["test_loss"]))
    out = []
    for row in rows.values():
        finals = row.pop("finals")
        row["mean_test_loss"] = statistics.fmean(finals) if finals else float("nan")
        row["test_losses"] = ";".join(repr(v) for v in finals)
        out.append(row)
    return out


def summary_csv(rows: list[dict]) -> str:
    return _csv(SUMMARY_COLUMNS, [[r[c] for c in SUMMARY_COLUMNS] for r in rows])


def run_plan(plan: ExperimentPlan, jobs: int = 1) -> list[dict]:
    """Execute every (run, seed) pair, write per-run artifacts and ``summary.csv``."""
    plan.validate()
    root = Path(plan.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    work = []
    for rep in range(plan.repetitions):
        task_spec = dataclasses.replace(plan.task, seed=plan.task.seed + rep)
        for spec in plan.runs:
            cfg = spec.config.replace(seed=spec.config.seed + rep)
            work.append((spec.label, cfg, task_spec, root / spec.label / f"seed{cfg.seed}"))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_one, work))
    else:
        records = [_one(w) for w in work]
    rows = summarize(records)
    _write(root / "summary.csv", summary_csv(rows))
    return rows


# --- configuration files -------------------------------------------------------

def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _allowed_keys() -> dict:
    keys = {f"task.{f.name}": f for f in dataclasses.fields(TaskSpec)}
    for f in dataclasses.fields(TrainConfig):
        if f.name == "schedule":
            keys.update({f"train.schedule.{g.name}": g for g in dataclasses.fields(BudgetSchedule)})
        else:
            keys[f"train.{f.name}"] = f
    keys.update({"plan.runs": None, "plan.repetitions": None, "plan.output_dir": None})
    return keys


def _coerce(name: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{name} must be true or false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not float(value).is_integer():
            raise ConfigurationError(f"{name} must be an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def parse_config(raw: dict) -> ExperimentPlan:
    """Build a plan from a (possibly nested) mapping of dotted keys. Unknown keys are errors."""
    flat = flatten(raw or {})
    allowed = _allowed_keys()
    unknown = sorted(set(flat) - set(allowed))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    task_kw, train_kw, sched_kw = {}, {}, {}
    task_defaults, train_defaults = TaskSpec(), TrainConfig()
    sched_defaults = train_defaults.schedule
    for key, value in flat.items():
        parts = key.split(".")
        if parts[0] == "task":
            task_kw[parts[1]] = _coerce(key, value, getattr(task_defaults, parts[1]))
        elif parts[0] == "train" and parts[1] == "schedule":
            sched_kw[parts[2]] = _coerce(key, value, getattr(sched_defaults, parts[2]))
        elif parts[0] == "train":
            train_kw[parts[1]] = _coerce(key, value, getattr(train_defaults, parts[1]))
    try:
        schedule = dataclasses.replace(sched_defaults, **sched_kw)
        base_cfg = TrainConfig(**train_kw, schedule=schedule)
        task = TaskSpec(**task_kw)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None
    runs = []
    for item in flat.get("plan.runs") or [base_cfg.mode.value]:
        mode, _, variant = str(item).partition(":")
        cfg = base_cfg.replace(mode=Mode.parse(mode),
                               variant=ScoreVariant.parse(variant) if variant else base_cfg.variant)
        if cfg.mode is Mode.ADALORA_NO_ORTH:
            cfg = cfg.replace(gamma=0.0)
        runs.append(RunSpec(str(item).replace(":", "-"), cfg))
    plan = ExperimentPlan(task=task, runs=runs,
                          repetitions=int(flat.get("plan.repetitions", 1)),
                          output_dir=str(flat.get("plan.output_dir", "runs")))
    return plan


def load_config(path) -> ExperimentPlan:
    with open(path, encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: {exc}".replace("\n", " ")) from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return parse_config(raw)


def read_records(root) -> list[dict]:
    """Collect ``result.json`` records below ``root`` (labels from the directory layout)."""
    records = []
    for path in sorted(Path(root).rglob("result.json")):
        with open(path, encoding="utf-8") as fh:
            rec = json.load(fh)
        rec.setdefault("label", path.parent.parent.name if path.parent.name.startswith("seed") else rec["mode"])
        records.append(rec)
    return records


def write_task(task: Task, out) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "task.npz", "wb") as fh:
        np.savez(fh, x_train=task.x_train, y_train=task.y_train, x_test=task.x_test, y_test=task.y_test)
    rows = [(k, li, kind, r) for (k, li, kind, _), r in zip(task.base.layer_items(), task.planted_ranks)]
    _write(out / "planted_ranks.csv", _csv(["matrix_id", "layer", "kind", "planted_rank"], rows))
    _write(out / "task.json", json.dumps(dataclasses.asdict(task.spec) | {"planted_ranks": task.planted_ranks},
                                         indent=1, sort_keys=True) + "\n")


__all__ = ["ExperimentPlan", "RunSpec", "run_plan", "save_run", "export_rank_heatmap", "export_orth_trace",
           "metrics_csv", "decisions_csv", "summarize", "load_config", "parse_config", "write_task"]
