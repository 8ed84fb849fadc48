"""Training loop with sensitivity bookkeeping, scheduled pruning and baselines."""
from __future__ import annotations

import dataclasses
import enum
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import linalg_ad as ad
from .adapters import KINDS, LoraAdapter, SvdAdapter, ToyModel, model_forward, orth_terms
from .allocator import BudgetSchedule, PruneDecision, effective_budget, initial_rank, prune
from .errors import ConfigurationError, ContractError, TrainingAborted
from .importance import EntryStats, ScoreVariant, sensitivity, triplet_score, update_stats
from .checkpoint import checkpoint_dict
from .linalg_ad import Tape

log = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    ADALORA = "AdaLoRA"
    ADALORA_NO_ORTH = "AdaLoRA_NoOrth"
    LORA_FIXED = "LoRA_Fixed"
    LORA_PRUNED = "LoRA_Pruned"
    SVD_LORA = "SVD_LoRA"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, cls):
            return value
        for m in cls:
            if value in (m.value, m.name, m.value.lower()):
                return m
        raise ConfigurationError(f"unknown mode {value!r}; expected one of {[m.value for m in cls]}")

    @property
    def uses_svd(self) -> bool:
        return self in (Mode.ADALORA, Mode.ADALORA_NO_ORTH, Mode.SVD_LORA)

    @property
    def prunes(self) -> bool:
        return self in (Mode.ADALORA, Mode.ADALORA_NO_ORTH, Mode.LORA_PRUNED)


@dataclass
class TrainConfig:
    eta: float = 1e-2
    gamma: float = 0.1
    beta1: float = 0.85
    beta2: float = 0.85
    delta_t: int = 10
    schedule: BudgetSchedule = field(default_factory=lambda: BudgetSchedule(96, 64, 300, 600, 3000))
    variant: ScoreVariant = ScoreVariant.SMOOTHED
    mode: Mode = Mode.ADALORA
    optimizer: str = "adamw"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 8
    seed: int = 0
    alpha: float = 16.0
    uncertainty_ref: str = "current"
    reset_optimizer_on_prune: bool = False

    def __post_init__(self):
        self.mode = Mode.parse(self.mode)
        self.variant = ScoreVariant.parse(self.variant)
        if isinstance(self.schedule, dict):
            self.schedule = BudgetSchedule(**self.schedule)

    def validate(self) -> "TrainConfig":
        if not self.eta > 0:
            raise ConfigurationError(f"eta must be positive, got {self.eta}")
        if self.gamma < 0:
            raise ConfigurationError(f"gamma must be non-negative, got {self.gamma}")
        if self.delta_t < 1:
            raise ConfigurationError(f"delta_t must be >= 1, got {self.delta_t}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigurationError(f"optimizer must be 'adamw' or 'sgd', got {self.optimizer!r}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigurationError(f"{name} must lie in (0, 1), got {v}")
        if self.variant is ScoreVariant.MAGNITUDE and self.mode not in (Mode.ADALORA, Mode.ADALORA_NO_ORTH):
            raise ConfigurationError(f"SingularMagnitude scoring needs singular values; mode {self.mode.value} has none")
        if self.mode is Mode.ADALORA_NO_ORTH and self.gamma != 0:
            raise ConfigurationError("AdaLoRA_NoOrth requires gamma = 0")
        return self

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class StepReport:
    step: int
    task_loss: float
    reg_loss: float
    total_loss: float
    budget: int
    active_triplets: int
    active_ranks: tuple


class SGD:
    def __init__(self, eta: float):
        self.eta = eta

    def step(self, key, param, grad):
        return param - self.eta * grad

    def reset(self, key, index=None):
        pass


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments; state kept per key."""

    def __init__(self, eta, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.eta = eta
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict = {}

    def step(self, key, param, grad):
        st = self.state.get(key)
        if st is None:
            st = self.state[key] = {"t": 0, "m": np.zeros_like(param), "v": np.zeros_like(param)}
        return adamw_step(param, grad, st, self.eta, (self.b1, self.b2), self.eps, self.weight_decay)

    def reset(self, key, index=None):
        st = self.state.get(key)
        if st is None:
            return
        if index is None:
            del self.state[key]
        else:
            st["m"][index] = 0.0
            st["v"][index] = 0.0


def adamw_step(param, grad, state, eta, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
    """One AdamW update; mutates ``state`` (keys ``t``, ``m``, ``v``) and returns the new parameter."""
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    state["m"] = b1 * state["m"] + (1.0 - b1) * grad
    state["v"] = b2 * state["v"] + (1.0 - b2) * grad * grad
    m_hat = state["m"] / (1.0 - b1 ** t)
    v_hat = state["v"] / (1.0 - b2 ** t)
    param = param * (1.0 - eta * weight_decay)
    return param - eta * m_hat / (np.sqrt(v_hat) + eps)


def split_budget(total: int, n: int) -> list[int]:
    """Spread ``total`` ranks over ``n`` matrices as evenly as possible; remainder to the lowest ids."""
    base, extra = divmod(int(total), int(n))
    return [base + (1 if k < extra else 0) for k in range(n)]


def task_loss(model: ToyModel, x: ad.Node, target, kind: str, seq_len: Optional[int]) -> ad.Node:
    out = model_forward(model, x, seq_len)
    if kind == "classification":
        return ad.softmax_cross_entropy(out, target)
    return ad.mse_loss(out, target)


def objective(model: ToyModel, batch, gamma: float, kind: str = "regression",
              seq_len: Optional[int] = None, tape: Optional[Tape] = None):
    """Build ``task + gamma * sum(orth penalties)`` on a fresh tape.

    Returns ``(total, task, penalties)`` where ``penalties`` maps matrix id to
    the ``(P-term, Q-term)`` node pair of each SVD adapter.
    """
    tape = tape if tape is not None else Tape()
    x, y = batch
    c = task_loss(model, tape.constant(x, "x"), y, kind, seq_len)
    penalties = {a.matrix_id: orth_terms(a, tape) for a in model.adapters if isinstance(a, SvdAdapter)}
    if gamma == 0 or not penalties:
        return c, c, penalties
    terms = [t for pair in penalties.values() for t in pair]
    reg = terms[0]
    for t in terms[1:]:
        reg = ad.add(reg, t)
    return ad.add(c, ad.scale(reg, gamma)), c, penalties


class TrainState:
    """Model, optimizer, sensitivity stats and prune log for one run."""

    def __init__(self, config: TrainConfig, model: ToyModel, kind: str = "regression",
                 seq_len: Optional[int] = None):
        self.config = config.validate()
        self.model = model
        self.kind = kind
        self.seq_len = seq_len
        self.adapters = model.adapters
        if not self.adapters:
            raise ConfigurationError("model has no adapters attached")
        self.total_units = sum(a.rank for a in self.adapters)
        self.schedule = config.schedule
        if config.optimizer == "adamw":
            self.optimizer = AdamW(config.eta, (config.adam_beta1, config.adam_beta2),
                                   config.adam_eps, config.weight_decay)
        else:
            self.optimizer = SGD(config.eta)
        self.stats = {a.matrix_id: {n: EntryStats.zeros(a.get(n).shape) for n in a.param_names}
                      for a in self.adapters}
        self.decisions: list[PruneDecision] = []
        self.frozen = False
        self.last_penalties: dict[int, tuple[float, float]] = {}

    @property
    def final_prune_step(self) -> Optional[int]:
        s = self.schedule
        if not self.config.mode.prunes or s.ti >= s.T - s.tf:
            return None
        return min(s.T - s.tf, s.T - 1)

    def is_prune_step(self, t: int) -> bool:
        if not self.config.mode.prunes:
            return False
        s = self.schedule
        if t == self.final_prune_step:
            return True
        return s.ti <= t < s.T - s.tf and t % self.config.delta_t == 0

    def prune_budget(self, t: int) -> int:
        if t == self.final_prune_step:
            return min(self.schedule.bT, self.total_units)
        return effective_budget(self.schedule, t, self.total_units)

    def live_budget(self, t: int) -> int:
        if not self.config.mode.prunes:
            return self.total_units
        if self.frozen:
            return min(self.schedule.bT, self.total_units)
        return effective_budget(self.schedule, min(t, self.schedule.T), self.total_units)

    def active_ranks(self) -> tuple:
        return tuple(int(a.mask.sum()) for a in self.adapters)


def _abort(t: int, model: ToyModel, grads) -> None:
    for a in model.adapters:
        for n in a.param_names:
            if not np.all(np.isfinite(a.get(n))) or not np.all(np.isfinite(grads[a.matrix_id][n])):
                raise TrainingAborted(f"non-finite loss at step {t}; adapter {a.matrix_id} "
                                      f"({a.kind}, layer {a.layer}) parameter {n!r}")
    raise TrainingAborted(f"non-finite loss at step {t}")


def train_step(state: TrainState, batch, t: int) -> StepReport:
    """Forward/backward, stats update, optimizer update, then prune on schedule."""
    cfg = state.config
    model = state.model
    if t < 0 or t > state.schedule.T:
        raise ContractError(f"step {t} outside the schedule horizon [0, {state.schedule.T}]")
    tape = Tape()
    total, c, penalties = objective(model, batch, cfg.gamma, state.kind, state.seq_len, tape)
    tape.backward(total)
    grads = {a.matrix_id: {n: node.grad for n, node in a.bind(tape).items()} for a in state.adapters}
    for a in state.adapters:
        a.unbind()
    if not np.isfinite(total.item()):
        _abort(t, model, grads)
    state.last_penalties = {k: (p.item(), q.item()) for k, (p, q) in penalties.items()}
    reg = sum(p + q for p, q in state.last_penalties.values())

    do_prune = state.is_prune_step(t)
    if cfg.mode.prunes and not state.frozen:
        for a in state.adapters:
            st = state.stats[a.matrix_id]
            for n in a.param_names:
                cur = sensitivity(a.get(n), grads[a.matrix_id][n])
                st[n] = update_stats(st[n], cur, cfg.beta1, cfg.beta2, cfg.uncertainty_ref)
    scores = []
    if do_prune:
        for a in state.adapters:
            w_grads = grads[a.matrix_id] if cfg.variant is ScoreVariant.RAW else None
            scores.extend(triplet_score(a, state.stats[a.matrix_id], cfg.variant, w_grads))

    for a in state.adapters:
        for n in a.param_names:
            key = (a.matrix_id, n)
            a.set(n, state.optimizer.step(key, a.get(n), grads[a.matrix_id][n]))
        if isinstance(a, LoraAdapter) and cfg.mode is Mode.LORA_PRUNED:
            # dropped doublets stay zero and untrained
            a.apply_mask(a.mask)
        elif state.frozen:
            a.apply_mask(a.mask)

    if do_prune:
        budget = state.prune_budget(t)
        decision = prune(scores, budget, state.adapters, step=t)
        state.decisions.append(decision)
        if cfg.reset_optimizer_on_prune:
            for a in state.adapters:
                dropped = np.flatnonzero(~a.mask)
                if not dropped.size:
                    continue
                if isinstance(a, SvdAdapter):
                    state.optimizer.reset((a.matrix_id, "lambda"), (slice(None), dropped))
                else:
                    state.optimizer.reset((a.matrix_id, "a"), (dropped, slice(None)))
                    state.optimizer.reset((a.matrix_id, "b"), (slice(None), dropped))
        if t == state.final_prune_step:
            state.frozen = True

    ranks = state.active_ranks()
    return StepReport(step=t, task_loss=c.item(), reg_loss=reg, total_loss=total.item(),
                      budget=state.live_budget(t), active_triplets=int(sum(ranks)), active_ranks=ranks)


@dataclass
class RunResult:
    config: TrainConfig
    model: ToyModel
    history: list
    decisions: list
    orth_trace: list
    init_checkpoint: dict
    test_loss: float
    rank: int
    aborted: Optional[str] = None

    @property
    def final_active(self) -> int:
        return self.history[-1].active_triplets if self.history else 0


def attach_for_mode(model: ToyModel, config: TrainConfig, rng: np.random.Generator) -> TrainConfig:
    """Attach adapters for ``config.mode`` and return the config with its effective schedule."""
    n = sum(1 for _ in model.layer_items())
    s = config.schedule
    model.detach()
    mode = config.mode
    if mode.prunes:
        r = initial_rank(s.b0, n)
        model.attach("svd" if mode.uses_svd else "lora", r, rng, alpha=config.alpha)
        if s.b0 != n * r:
            log.info("initial budget %d adjusted to %d (rank %d on %d matrices)", s.b0, n * r, r, n)
        return config.replace(schedule=dataclasses.replace(s, b0=n * r))
    ranks = split_budget(s.bT, n)
    if min(ranks) < 1:
        raise ConfigurationError(f"final budget {s.bT} cannot give every one of {n} matrices a rank")
    model.attach("svd" if mode.uses_svd else "lora", ranks, rng, alpha=config.alpha)
    return config


def evaluate(model: ToyModel, x, y, kind: str = "regression", seq_len: Optional[int] = None) -> float:
    tape = Tape()
    loss = task_loss(model, tape.constant(x, "x"), y, kind, seq_len).item()
    for a in model.adapters:
        a.unbind()
    return loss


def run(config: TrainConfig, task, model: Optional[ToyModel] = None) -> RunResult:
    """Train adapters on ``task`` for ``config.schedule.T`` steps.

    ``task`` needs ``base`` (a :class:`ToyModel`), ``x_train``, ``y_train``,
    ``x_test``, ``y_test``, ``seq_len`` and ``kind``.
    """
    config.validate()
    rng = ad.make_rng(config.seed)
    model = model if model is not None else task.base.copy_base()
    config = attach_for_mode(model, config, rng)
    state = TrainState(config, model, task.kind, task.seq_len)
    init_ckpt = checkpoint_dict(model)
    n_seq = task.x_train.shape[0] // task.seq_len
    bs = min(config.batch_size, n_seq)
    history, trace = [], []
    aborted = None
    for t in range(config.schedule.T):
        idx = rng.choice(n_seq, size=bs, replace=False)
        rows = (idx[:, None] * task.seq_len + np.arange(task.seq_len)).reshape(-1)
        batch = (task.x_train[rows], task.y_train[rows])
        try:
            report = train_step(state, batch, t)
        except TrainingAborted as exc:
            aborted = str(exc)
            log.warning("run aborted: %s", exc)
            break
        history.append(report)
        trace.append(state.last_penalties)
    test = evaluate(model, task.x_test, task.y_test, task.kind, task.seq_len) if aborted is None else float("nan")
    return RunResult(config=config, model=model, history=history, decisions=state.decisions,
                     orth_trace=trace, init_checkpoint=init_ckpt, test_loss=test,
                     rank=state.adapters[0].rank, aborted=aborted)


def prune_lora_step(state: TrainState, batch, t: int) -> StepReport:
    """Training step for the doublet-pruned LoRA baseline."""
    if state.config.mode is not Mode.LORA_PRUNED:
        raise ContractError(f"prune_lora_step needs mode LoRA_Pruned, got {state.config.mode.value}")
    return train_step(state, batch, t)


def per_kind_ranks(adapters, ranks) -> dict[str, int]:
    out = {k: 0 for k in KINDS}
    for a, r in zip(adapters, ranks):
        out[a.kind] += r
    return out
