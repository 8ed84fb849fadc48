"""Entry sensitivity, its EMA smoothing / uncertainty, and per-triplet scores."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .errors import ConfigurationError, ContractError


class ScoreVariant(str, enum.Enum):
    SMOOTHED = "SmoothedSensitivity"
    RAW = "RawSensitivity"
    MAGNITUDE = "SingularMagnitude"

    @classmethod
    def parse(cls, value) -> "ScoreVariant":
        if isinstance(value, cls):
            return value
        for v in cls:
            if value in (v.value, v.name, v.name.lower()):
                return v
        raise ConfigurationError(f"unknown score variant {value!r}; expected one of {[v.value for v in cls]}")


@dataclass
class EntryStats:
    """Smoothed sensitivity ``ibar`` and uncertainty ``ubar`` for one parameter array."""

    ibar: np.ndarray
    ubar: np.ndarray

    @classmethod
    def zeros(cls, shape) -> "EntryStats":
        return cls(np.zeros(shape), np.zeros(shape))


@dataclass(frozen=True)
class TripletScore:
    matrix_id: int
    triplet_index: int
    score: float


def sensitivity(w, g):
    """``|w * g|``: first-order loss change from zeroing ``w``."""
    return np.abs(np.multiply(w, g))


def _check_beta(name: str, beta: float) -> None:
    if not 0.0 < beta < 1.0:
        raise ConfigurationError(f"{name} must lie in (0, 1), got {beta}")


def update_stats(stats: EntryStats, current, beta1: float, beta2: float,
                 uncertainty_ref: str = "current", strict: bool = True) -> EntryStats:
    """One EMA step for sensitivity and uncertainty.

    ``uncertainty_ref="current"`` measures ``|I - ibar|`` against the freshly
    updated ``ibar``; ``"previous"`` uses the value before this step.
    ``strict=False`` admits the degenerate betas 0 and 1.
    """
    if strict:
        _check_beta("beta1", beta1)
        _check_beta("beta2", beta2)
    elif not (0.0 <= beta1 <= 1.0 and 0.0 <= beta2 <= 1.0):
        raise ConfigurationError(f"betas must lie in [0, 1], got {beta1}, {beta2}")
    current = np.asarray(current, dtype=np.float64)
    if current.shape != stats.ibar.shape:
        raise ContractError(f"sensitivity shape {current.shape} does not match stats {stats.ibar.shape}")
    ibar = beta1 * stats.ibar + (1.0 - beta1) * current
    if uncertainty_ref == "current":
        ref = ibar
    elif uncertainty_ref == "previous":
        ref = stats.ibar
    else:
        raise ConfigurationError(f"uncertainty_ref must be 'current' or 'previous', got {uncertainty_ref!r}")
    ubar = beta2 * stats.ubar + (1.0 - beta2) * np.abs(current - ref)
    return EntryStats(ibar, ubar)


def entry_score(stats: Optional[EntryStats], w, g, variant: ScoreVariant) -> np.ndarray:
    variant = ScoreVariant.parse(variant)
    if variant is ScoreVariant.SMOOTHED:
        return stats.ibar * stats.ubar
    if variant is ScoreVariant.RAW:
        return sensitivity(w, g)
    raise ContractError("SingularMagnitude scores triplets directly, not entries")


def _entry_scores(adapter, names, stats, grads, variant):
    out = {}
    for n in names:
        w = adapter.get(n)
        g = None if grads is None else grads[n]
        s = None if stats is None else stats[n]
        if variant is ScoreVariant.RAW and g is None:
            raise ContractError(f"RawSensitivity needs the gradient of {n!r}")
        if variant is ScoreVariant.SMOOTHED and s is None:
            raise ContractError(f"SmoothedSensitivity needs stats for {n!r}")
        out[n] = entry_score(s, w, g, variant)
    return out


def triplet_scores(adapter, stats: Optional[Mapping[str, EntryStats]], variant,
                   grads: Optional[Mapping[str, np.ndarray]] = None) -> np.ndarray:
    """Score vector of length r for an SVD adapter.

    Sensitivity variants add the singular value's entry score to the means of
    the entry scores over the matching column of P and row of Q.
    """
    variant = ScoreVariant.parse(variant)
    if variant is ScoreVariant.MAGNITUDE:
        return np.abs(adapter.lam).astype(np.float64)
    s = _entry_scores(adapter, ("p", "lambda", "q"), stats, grads, variant)
    return s["lambda"].reshape(-1) + s["p"].mean(axis=0) + s["q"].mean(axis=1)


def doublet_scores(adapter, stats: Optional[Mapping[str, EntryStats]], variant,
                   grads: Optional[Mapping[str, np.ndarray]] = None) -> np.ndarray:
    """Score vector of length r for a LoRA adapter: mean over the row of A plus mean over the column of B."""
    variant = ScoreVariant.parse(variant)
    if variant is ScoreVariant.MAGNITUDE:
        raise ConfigurationError("SingularMagnitude is undefined for LoRA doublets")
    s = _entry_scores(adapter, ("a", "b"), stats, grads, variant)
    return s["a"].mean(axis=1) + s["b"].mean(axis=0)


def triplet_score(adapter, stats, variant, grads=None) -> list[TripletScore]:
    """Per-triplet scores as records, masked triplets included."""
    if hasattr(adapter, "lam"):
        vec = triplet_scores(adapter, stats, variant, grads)
    else:
        vec = doublet_scores(adapter, stats, variant, grads)
    return [TripletScore(adapter.matrix_id, i, float(v)) for i, v in enumerate(vec)]
