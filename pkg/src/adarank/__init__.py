"""Adaptive budget allocation for low-rank adapters on a small numpy transformer."""
from .adapters import LoraAdapter, SvdAdapter, ToyModel, effective_delta, model_forward, orth_penalty, predict
from .allocator import BudgetSchedule, PruneDecision, budget_at, initial_rank, prune
from .errors import (AdaRankError, ConfigurationError, ContractError, DimensionError, InputError,
                     TrainingAborted, UnsupportedModeError)
from .estimator import AdaptiveLowRankRegressor
from .experiments import ExperimentPlan, RunSpec, export_orth_trace, export_rank_heatmap, run_plan
from .importance import EntryStats, ScoreVariant, TripletScore, sensitivity, triplet_score, update_stats
from .tasks import Task, TaskSpec, gen_task
from .trainer import Mode, RunResult, TrainConfig, run, train_step

__version__ = "0.1.0"

__all__ = [
    "AdaRankError", "AdaptiveLowRankRegressor", "BudgetSchedule", "ConfigurationError", "ContractError",
    "DimensionError", "EntryStats", "ExperimentPlan", "InputError", "LoraAdapter", "Mode", "PruneDecision",
    "RunResult", "RunSpec", "ScoreVariant", "SvdAdapter", "Task", "TaskSpec", "ToyModel", "TrainConfig",
    "TrainingAborted", "TripletScore", "UnsupportedModeError", "budget_at", "effective_delta",
    "export_orth_trace", "export_rank_heatmap", "gen_task", "initial_rank", "model_forward", "orth_penalty",
    "predict", "prune", "run", "run_plan", "sensitivity", "train_step", "triplet_score", "update_stats",
]
