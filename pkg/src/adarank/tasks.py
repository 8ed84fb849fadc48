"""Synthetic teacher/student tasks with planted low-rank weight deltas."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .adapters import KINDS, Block, FrozenLinear, ToyModel, predict
from .errors import ConfigurationError
from .linalg_ad import make_rng

TASK_KINDS = ("regression_teacher", "classification_toy")
DEFAULT_PLANTED_POOL = (0, 1, 2, 6)


@dataclass
class TaskSpec:
    kind: str = "regression_teacher"
    layers: int = 4
    width: int = 32
    heads: int = 4
    ffn_width: int = 64
    planted_ranks: Optional[list] = None
    noise_std: float = 0.05
    seq_len: int = 8
    train_sequences: int = 1024
    test_sequences: int = 64
    seed: int = 0
    sv_low: float = 0.5
    sv_high: float = 2.0

    @property
    def n_matrices(self) -> int:
        return self.layers * len(KINDS)

    def shapes(self) -> list[tuple[int, int]]:
        d, dm = self.width, self.ffn_width
        per_block = {"Wq": (d, d), "Wk": (d, d), "Wv": (d, d), "Wo": (d, d), "Wf1": (d, dm), "Wf2": (dm, d)}
        return [per_block[k] for _ in range(self.layers) for k in KINDS]

    def resolved_ranks(self) -> list[int]:
        """Planted ranks, or a seed-dependent shuffle of an even mix of 0/1/2/6."""
        if self.planted_ranks is not None:
            return [int(r) for r in self.planted_ranks]
        n = self.n_matrices
        pool = np.resize(np.array(DEFAULT_PLANTED_POOL), n)
        return [int(r) for r in make_rng(self.seed + 0x5EED).permutation(pool)]

    def validate(self) -> "TaskSpec":
        if self.kind not in TASK_KINDS:
            raise ConfigurationError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.width % self.heads:
            raise ConfigurationError(f"width {self.width} is not divisible by {self.heads} heads")
        for name in ("layers", "width", "heads", "ffn_width", "seq_len", "train_sequences", "test_sequences"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        ranks = self.resolved_ranks()
        if len(ranks) != self.n_matrices:
            raise ConfigurationError(f"planted_ranks needs {self.n_matrices} entries, got {len(ranks)}")
        for k, (r, (d1, d2)) in enumerate(zip(ranks, self.shapes())):
            if r < 0 or r > min(d1, d2):
                raise ConfigurationError(f"planted rank {r} for matrix {k} exceeds its dimensions {d1}x{d2}")
        if not 0 < self.sv_low <= self.sv_high:
            raise ConfigurationError("need 0 < sv_low <= sv_high")
        return self


@dataclass
class Task:
    spec: TaskSpec
    base: ToyModel
    teacher: ToyModel
    deltas: list
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    planted_ranks: list = field(default_factory=list)

    @property
    def seq_len(self) -> int:
        return self.spec.seq_len

    @property
    def kind(self) -> str:
        return "classification" if self.spec.kind == "classification_toy" else "regression"


def planted_delta(d1: int, d2: int, rank: int, rng: np.random.Generator, low=0.5, high=2.0) -> np.ndarray:
    """Rank-``rank`` matrix from thin orthonormalized Gaussian factors, log-uniform singular values."""
    if rank == 0:
        return np.zeros((d1, d2))
    u, _ = np.linalg.qr(rng.normal(size=(d1, rank)))
    v, _ = np.linalg.qr(rng.normal(size=(d2, rank)))
    s = np.exp(rng.uniform(np.log(low), np.log(high), size=rank))
    return (u * s) @ v.T


def gen_task(spec: TaskSpec) -> Task:
    spec.validate()
    rng = make_rng(spec.seed)
    base = ToyModel.random(spec.layers, spec.width, spec.heads, spec.ffn_width, rng)
    ranks = spec.resolved_ranks()
    deltas = []
    blocks = []
    items = list(base.layer_items())
    for block in base.blocks:
        blocks.append(Block(dict(block.layers)))
    for (mid, li, kind, lin), r in zip(items, ranks):
        delta = planted_delta(*lin.shape, r, rng, spec.sv_low, spec.sv_high)
        deltas.append(delta)
        if r:
            blocks[li].layers[kind] = FrozenLinear(lin.w0 + delta, lin.bias)
    teacher = ToyModel(blocks, spec.heads)

    def sample(n_seq):
        x = rng.normal(size=(n_seq * spec.seq_len, spec.width))
        out = predict(teacher, x, spec.seq_len)
        noisy = out + spec.noise_std * rng.normal(size=out.shape)
        if spec.kind == "classification_toy":
            return x, np.argmax(noisy, axis=1).astype(np.int64)
        return x, noisy

    x_train, y_train = sample(spec.train_sequences)
    x_test, y_test = sample(spec.test_sequences)
    return Task(spec, base, teacher, deltas, x_train, y_train, x_test, y_test, ranks)
