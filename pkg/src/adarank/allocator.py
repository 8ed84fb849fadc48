"""Cubic global budget schedule and global top-b triplet selection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError
from .importance import TripletScore

SCHEDULE_FORMS = ("as_printed", "ti_only")


@dataclass(frozen=True)
class BudgetSchedule:
    b0: int
    bT: int
    ti: int
    tf: int
    T: int
    form: str = "as_printed"

    def __post_init__(self):
        if not self.b0 >= self.bT >= 0:
            raise ConfigurationError(f"need b0 >= bT >= 0, got b0={self.b0}, bT={self.bT}")
        if self.ti < 0 or self.tf < 0 or self.ti + self.tf > self.T:
            raise ConfigurationError(f"need ti, tf >= 0 and ti + tf <= T, got ti={self.ti}, tf={self.tf}, T={self.T}")
        if self.form not in SCHEDULE_FORMS:
            raise ConfigurationError(f"schedule form must be one of {SCHEDULE_FORMS}, got {self.form!r}")

    def raw_at(self, t: float) -> float:
        """Real-valued budget before rounding."""
        if t < self.ti:
            return float(self.b0)
        if t >= self.T - self.tf:
            return float(self.bT)
        span = self.T - self.ti - self.tf
        offset = t - self.ti - self.tf if self.form == "as_printed" else t - self.ti
        return self.bT + (self.b0 - self.bT) * (1.0 - offset / span) ** 3


def budget_at(schedule: BudgetSchedule, t: int) -> int:
    """Integer budget at step ``t``; mid-schedule values round to nearest, ties up.

    With ``form="as_printed"`` the cubic branch can exceed ``b0`` just after
    warm-up.  Callers that need a monotone budget should clip with
    :func:`effective_budget`.
    """
    if not 0 <= t <= schedule.T:
        raise ContractError(f"step {t} outside [0, {schedule.T}]")
    return int(math.floor(schedule.raw_at(t) + 0.5))


def effective_budget(schedule: BudgetSchedule, t: int, total: int) -> int:
    """``budget_at`` clipped to ``[0, min(b0, total)]``."""
    return max(0, min(budget_at(schedule, t), schedule.b0, total))


def initial_rank(b0: int, n: int) -> int:
    if n < 1:
        raise ContractError(f"need at least one adapted matrix, got n={n}")
    return max(1, -(-int(b0) // int(n)))


@dataclass
class PruneDecision:
    step: int
    budget: int
    kept: set = field(default_factory=set)
    dropped: set = field(default_factory=set)
    reactivated: set = field(default_factory=set)

    def rows(self) -> list[tuple[int, int, int, str]]:
        """``(step, matrix_id, triplet_index, action)`` rows, sorted by key."""
        out = []
        for key in sorted(self.kept | self.dropped):
            if key in self.dropped:
                action = "drop"
            elif key in self.reactivated:
                action = "reactivate"
            else:
                action = "keep"
            out.append((self.step, key[0], key[1], action))
        return out


def select_top(scores: Iterable[TripletScore], budget: int) -> tuple[set, set]:
    """Split triplet keys into (kept, dropped) by score; ties go to lower matrix id, then index."""
    scores = list(scores)
    if budget < 0:
        raise ContractError(f"budget must be non-negative, got {budget}")
    keys = [(s.matrix_id, s.triplet_index) for s in scores]
    if len(set(keys)) != len(keys):
        raise ContractError("duplicate (matrix_id, triplet_index) in score list")
    for s in scores:
        if not math.isfinite(s.score):
            raise ContractError(f"non-finite score for triplet {(s.matrix_id, s.triplet_index)}")
    ordered = sorted(scores, key=lambda s: (-s.score, s.matrix_id, s.triplet_index))
    kept = {(s.matrix_id, s.triplet_index) for s in ordered[:budget]}
    return kept, set(keys) - kept


def prune(scores: Sequence[TripletScore], budget: int, adapters: Sequence, step: int = 0) -> PruneDecision:
    """Keep the globally top-``budget`` triplets and zero the rest in place.

    ``adapters`` must expose ``matrix_id``, ``rank``, ``mask`` and ``apply_mask``.
    """
    by_id = {a.matrix_id: a for a in adapters}
    expected = {(a.matrix_id, i) for a in adapters for i in range(a.rank)}
    got = {(s.matrix_id, s.triplet_index) for s in scores}
    kept, dropped = select_top(scores, budget)
    if got != expected:
        raise ContractError("scores must cover every triplet of every adapter exactly once")
    reactivated = set()
    for mid, a in by_id.items():
        keep = np.array([(mid, i) in kept for i in range(a.rank)], dtype=bool)
        reactivated |= {(mid, i) for i in np.flatnonzero(keep & ~a.mask)}
        a.apply_mask(keep)
    return PruneDecision(step=step, budget=budget, kept=kept, dropped=dropped, reactivated=reactivated)
