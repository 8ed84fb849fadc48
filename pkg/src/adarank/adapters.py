"""Frozen layers, LoRA and SVD-form incremental updates, and a small transformer.

Row convention throughout: an input batch ``x`` is ``(rows, d1)`` and a layer
computes ``x @ W`` with ``W`` of shape ``(d1, d2)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import linalg_ad as ad
from .errors import ConfigurationError, DimensionError
from .linalg_ad import Node, Tape

KINDS = ("Wq", "Wk", "Wv", "Wo", "Wf1", "Wf2")
INIT_STD = 0.02
DEFAULT_ALPHA = 16.0
MASK_FILL = -1e30


@dataclass
class FrozenLinear:
    w0: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        self.w0 = ad.as_matrix(self.w0, "w0")
        self.w0.setflags(write=False)
        if self.bias is not None:
            self.bias = ad.as_matrix(self.bias, "bias")
            if self.bias.shape != (1, self.w0.shape[1]):
                raise DimensionError(f"bias shape {self.bias.shape} does not match w0 {self.w0.shape}")
            self.bias.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.w0.shape

    def forward(self, x: Node) -> Node:
        if x.shape[1] != self.w0.shape[0]:
            raise DimensionError(f"input width {x.shape[1]} does not match weight {self.w0.shape}")
        out = ad.matmul(x, x.tape.constant(self.w0, "w0"))
        if self.bias is not None:
            out = ad.add(out, x.tape.constant(self.bias, "bias"))
        return out


class _Bound:
    """Per-tape cache of parameter nodes for one adapter."""

    param_names: tuple[str, ...] = ()

    def bind(self, tape: Tape) -> dict[str, Node]:
        if getattr(self, "_tape", None) is not tape:
            self._tape = tape
            self._nodes = {n: tape.parameter(self.get(n), n) for n in self.param_names}
        return self._nodes

    def unbind(self) -> None:
        """Drop the cached tape so its nodes can be freed."""
        self._tape = None
        self._nodes = {}

    def get(self, name: str) -> np.ndarray:
        raise NotImplementedError

    def set(self, name: str, value: np.ndarray) -> None:
        raise NotImplementedError

    def params(self) -> dict[str, np.ndarray]:
        return {n: self.get(n) for n in self.param_names}


@dataclass(eq=False)
class LoraAdapter(_Bound):
    """``delta = B @ A`` with ``A`` (r, d2) and ``B`` (d1, r)."""

    a: np.ndarray
    b: np.ndarray
    alpha: float = DEFAULT_ALPHA
    mask: Optional[np.ndarray] = None
    matrix_id: int = 0
    kind: str = "Wq"
    layer: int = 0
    param_names = ("a", "b")

    def __post_init__(self):
        self.a = ad.as_matrix(self.a, "a")
        self.b = ad.as_matrix(self.b, "b")
        if self.a.shape[0] != self.b.shape[1]:
            raise DimensionError(f"LoRA factors disagree on rank: A {self.a.shape}, B {self.b.shape}")
        if self.mask is None:
            self.mask = np.ones(self.rank, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool).copy()

    @classmethod
    def init(cls, d1: int, d2: int, rank: int, rng: np.random.Generator, alpha=DEFAULT_ALPHA, **kw):
        a = rng.normal(0.0, INIT_STD, size=(rank, d2))
        return cls(a=a, b=np.zeros((d1, rank)), alpha=alpha, **kw)

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def shape(self) -> tuple[int, int]:
        return (self.b.shape[0], self.a.shape[1])

    def get(self, name):
        return getattr(self, name)

    def set(self, name, value):
        setattr(self, name, value)

    def apply_mask(self, keep: np.ndarray) -> None:
        """Drop doublets outside ``keep``: zero their row of A and column of B."""
        keep = np.asarray(keep, dtype=bool)
        self.mask = keep.copy()
        self.a[~keep, :] = 0.0
        self.b[:, ~keep] = 0.0

    def effective_delta(self) -> np.ndarray:
        return self.scaling * (self.b * self.mask) @ self.a


@dataclass(eq=False)
class SvdAdapter(_Bound):
    """``delta = P diag(lambda) Q`` with ``P`` (d1, r), ``lambda`` (r,), ``Q`` (r, d2).

    Pruning zeroes entries of ``lam`` in place; ``mask`` records the last
    prune decision.  The singular vectors stay trainable either way.
    """

    p: np.ndarray
    lam: np.ndarray
    q: np.ndarray
    alpha: float = DEFAULT_ALPHA
    mask: Optional[np.ndarray] = None
    matrix_id: int = 0
    kind: str = "Wq"
    layer: int = 0
    param_names = ("p", "lambda", "q")

    def __post_init__(self):
        self.p = ad.as_matrix(self.p, "p")
        self.q = ad.as_matrix(self.q, "q")
        self.lam = np.array(self.lam, dtype=np.float64).reshape(-1)
        r = self.lam.shape[0]
        if self.p.shape[1] != r or self.q.shape[0] != r:
            raise DimensionError(f"SVD factors disagree on rank: P {self.p.shape}, "
                                 f"lambda ({r},), Q {self.q.shape}")
        if self.mask is None:
            self.mask = np.ones(r, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool).copy()

    @classmethod
    def init(cls, d1: int, d2: int, rank: int, rng: np.random.Generator, alpha=DEFAULT_ALPHA, **kw):
        p = rng.normal(0.0, INIT_STD, size=(d1, rank))
        q = rng.normal(0.0, INIT_STD, size=(rank, d2))
        return cls(p=p, lam=np.zeros(rank), q=q, alpha=alpha, **kw)

    @property
    def rank(self) -> int:
        return self.lam.shape[0]

    @property
    def scaling(self) -> float:
        # initial rank, fixed for the life of the adapter
        return self.alpha / self.rank

    @property
    def shape(self) -> tuple[int, int]:
        return (self.p.shape[0], self.q.shape[1])

    def get(self, name):
        if name == "lambda":
            return self.lam.reshape(1, -1)
        return getattr(self, name)

    def set(self, name, value):
        if name == "lambda":
            self.lam = np.asarray(value, dtype=np.float64).reshape(-1)
        else:
            setattr(self, name, value)

    def apply_mask(self, keep: np.ndarray) -> None:
        keep = np.asarray(keep, dtype=bool)
        self.mask = keep.copy()
        self.lam[~keep] = 0.0

    def active_rank(self) -> int:
        return int(np.count_nonzero(self.mask & (self.lam != 0)))

    def effective_delta(self) -> np.ndarray:
        return effective_delta(self)


def lora_forward(layer: FrozenLinear, adapter: LoraAdapter, x: Node) -> Node:
    if layer.shape != adapter.shape:
        raise DimensionError(f"adapter shape {adapter.shape} does not match layer {layer.shape}")
    base = layer.forward(x)
    nodes = adapter.bind(x.tape)
    b = nodes["b"]
    if not adapter.mask.all():
        b = ad.mul(b, x.tape.constant(np.broadcast_to(adapter.mask, b.shape).astype(float)))
    delta = ad.matmul(ad.matmul(x, b), nodes["a"])
    return ad.add(base, ad.scale(delta, adapter.scaling))


def svd_forward(layer: FrozenLinear, adapter: SvdAdapter, x: Node) -> Node:
    """``x @ W0 (+ bias) + (alpha / r) * ((x @ P) * lambda) @ Q``."""
    if layer.shape != adapter.shape:
        raise DimensionError(f"adapter shape {adapter.shape} does not match layer {layer.shape}")
    base = layer.forward(x)
    nodes = adapter.bind(x.tape)
    xp = ad.mul_cols(ad.matmul(x, nodes["p"]), nodes["lambda"])
    delta = ad.matmul(xp, nodes["q"])
    return ad.add(base, ad.scale(delta, adapter.scaling))


def orth_terms(adapter: SvdAdapter, tape: Tape) -> tuple[Node, Node]:
    """The two halves of the orthogonality penalty, ``|P'P - I|^2`` and ``|QQ' - I|^2``."""
    nodes = adapter.bind(tape)
    p, q = nodes["p"], nodes["q"]
    eye = np.eye(adapter.rank)
    pp = ad.add_const(ad.matmul(ad.transpose(p), p), -eye)
    qq = ad.add_const(ad.matmul(q, ad.transpose(q)), -eye)
    return ad.frob_norm_sq(pp), ad.frob_norm_sq(qq)


def orth_penalty(adapter: SvdAdapter, tape: Optional[Tape] = None) -> Node:
    tape = tape if tape is not None else Tape()
    p_term, q_term = orth_terms(adapter, tape)
    return ad.add(p_term, q_term)


def effective_delta(adapter: SvdAdapter) -> np.ndarray:
    lam = np.where(adapter.mask, adapter.lam, 0.0)
    return adapter.scaling * (adapter.p * lam) @ adapter.q


@dataclass
class Block:
    layers: dict[str, FrozenLinear]
    adapters: dict[str, object] = field(default_factory=dict)


@dataclass
class ToyModel:
    """Post-LN transformer stack whose six weight matrices per block can carry adapters."""

    blocks: list[Block]
    heads: int

    def __post_init__(self):
        d = self.width
        if d % self.heads:
            raise ConfigurationError(f"width {d} is not divisible by {self.heads} heads")

    @classmethod
    def random(cls, layers: int, d: int, heads: int, d_ff: int, rng: np.random.Generator) -> "ToyModel":
        if d % heads:
            raise ConfigurationError(f"width {d} is not divisible by {heads} heads")
        blocks = []
        for _ in range(layers):
            shapes = {"Wq": (d, d), "Wk": (d, d), "Wv": (d, d), "Wo": (d, d),
                      "Wf1": (d, d_ff), "Wf2": (d_ff, d)}
            mats = {k: FrozenLinear(rng.normal(0.0, 1.0 / np.sqrt(s[0]), size=s)) for k, s in shapes.items()}
            mats["Wf1"] = FrozenLinear(mats["Wf1"].w0, rng.normal(0.0, 0.1, size=(1, d_ff)))
            mats["Wf2"] = FrozenLinear(mats["Wf2"].w0, rng.normal(0.0, 0.1, size=(1, d)))
            blocks.append(Block(mats))
        return cls(blocks, heads)

    @property
    def width(self) -> int:
        return self.blocks[0].layers["Wq"].shape[0]

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    def layer_items(self):
        """Yield ``(matrix_id, layer_index, kind, FrozenLinear)`` in registry order."""
        for li, block in enumerate(self.blocks):
            for ki, kind in enumerate(KINDS):
                yield li * len(KINDS) + ki, li, kind, block.layers[kind]

    @property
    def adapters(self) -> list:
        out = []
        for _, li, kind, _ in self.layer_items():
            a = self.blocks[li].adapters.get(kind)
            if a is not None:
                out.append(a)
        return out

    def attach(self, mode: str, ranks, rng: np.random.Generator, alpha: float = DEFAULT_ALPHA) -> None:
        """Attach fresh ``"svd"`` or ``"lora"`` adapters; ``ranks`` is an int or one int per matrix."""
        items = list(self.layer_items())
        if np.isscalar(ranks):
            ranks = [int(ranks)] * len(items)
        if len(ranks) != len(items):
            raise ConfigurationError(f"need {len(items)} ranks, got {len(ranks)}")
        factory = {"svd": SvdAdapter, "lora": LoraAdapter}[mode]
        for (mid, li, kind, lin), r in zip(items, ranks):
            d1, d2 = lin.shape
            self.blocks[li].adapters[kind] = factory.init(
                d1, d2, int(r), rng, alpha=alpha, matrix_id=mid, kind=kind, layer=li)

    def detach(self) -> None:
        for block in self.blocks:
            block.adapters.clear()

    def copy_base(self) -> "ToyModel":
        return ToyModel([Block(dict(b.layers)) for b in self.blocks], self.heads)


def _linear(block: Block, kind: str, x: Node) -> Node:
    layer = block.layers[kind]
    adapter = block.adapters.get(kind)
    if adapter is None:
        return layer.forward(x)
    if isinstance(adapter, SvdAdapter):
        return svd_forward(layer, adapter, x)
    return lora_forward(layer, adapter, x)


def sequence_mask(rows: int, seq_len: Optional[int]) -> Optional[np.ndarray]:
    """Additive attention mask keeping attention inside each length-``seq_len`` run of rows."""
    if seq_len is None or seq_len >= rows:
        return None
    if rows % seq_len:
        raise DimensionError(f"{rows} rows do not split into sequences of length {seq_len}")
    seq = np.arange(rows) // seq_len
    return np.where(seq[:, None] == seq[None, :], 0.0, MASK_FILL)


def model_forward(model: ToyModel, x: Node, seq_len: Optional[int] = None,
                  record: Optional[list] = None) -> Node:
    """Run every block on ``x`` (rows = tokens, stacked sequence after sequence).

    If ``record`` is a list, the per-head attention-weight nodes are appended to it.
    """
    if x.shape[1] != model.width:
        raise DimensionError(f"input width {x.shape[1]} does not match model width {model.width}")
    mask = sequence_mask(x.shape[0], seq_len)
    dh = model.head_dim
    inv_sqrt = 1.0 / np.sqrt(dh)
    h = x
    for block in model.blocks:
        q = _linear(block, "Wq", h)
        k = _linear(block, "Wk", h)
        v = _linear(block, "Wv", h)
        heads = []
        for i in range(model.heads):
            lo, hi = i * dh, (i + 1) * dh
            scores = ad.scale(ad.matmul(ad.cols(q, lo, hi), ad.transpose(ad.cols(k, lo, hi))), inv_sqrt)
            if mask is not None:
                scores = ad.add_const(scores, mask)
            attn = ad.row_softmax(scores)
            if record is not None:
                record.append(attn)
            heads.append(ad.matmul(attn, ad.cols(v, lo, hi)))
        mha = _linear(block, "Wo", ad.hconcat(heads) if len(heads) > 1 else heads[0])
        h = ad.layer_norm(ad.add(h, mha))
        ffn = _linear(block, "Wf2", ad.relu(_linear(block, "Wf1", h)))
        h = ad.layer_norm(ad.add(h, ffn))
    return h


def predict(model: ToyModel, x: np.ndarray, seq_len: Optional[int] = None,
            chunk: int = 32) -> np.ndarray:
    """Forward pass on a plain array, ``chunk`` sequences at a time."""
    x = np.asarray(x, dtype=np.float64)
    step = x.shape[0] if seq_len is None else seq_len * chunk
    outs = []
    for lo in range(0, x.shape[0], step):
        tape = Tape()
        outs.append(model_forward(model, tape.constant(x[lo:lo + step], "x"), seq_len).value)
    for a in model.adapters:
        a.unbind()
    return np.vstack(outs)
