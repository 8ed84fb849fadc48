"""Dense float64 matrices and a single-shot reverse-mode tape.

Every value on the tape is a 2-D ``numpy.ndarray`` of dtype float64.  Ops are
plain functions taking :class:`Node` objects; each one records a closure that
maps the output gradient to the gradients of its parents.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError, InputError

__all__ = [
    "Node",
    "Tape",
    "as_matrix",
    "make_rng",
    "matmul",
    "add",
    "add_const",
    "scale",
    "transpose",
    "relu",
    "row_softmax",
    "mul",
    "mul_cols",
    "cols",
    "hconcat",
    "layer_norm",
    "sum_all",
    "mse_loss",
    "softmax_cross_entropy",
    "frob_norm_sq",
]

LN_EPS = 1e-5


def as_matrix(value, name: str = "value") -> np.ndarray:
    """Coerce ``value`` to a finite 2-D float64 array."""
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise DimensionError(f"{name} must be a non-empty 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite entries")
    return arr


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based 64-bit generator (Philox) seeded from ``seed``."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


class Node:
    __slots__ = ("id", "tape", "value", "op", "parents", "requires_grad", "_grad", "_backward")

    def __init__(self, tape, id, value, op, parents, requires_grad, backward):
        self.tape = tape
        self.id = id
        self.value = value
        self.op = op
        self.parents = parents
        self.requires_grad = requires_grad
        self._grad = None
        self._backward = backward

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def item(self) -> float:
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"


class Tape:
    """Append-only record of nodes. Confined to one thread; one backward per tape."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.parameters: set[int] = set()
        self._consumed = False

    def _push(self, value, op, parents=(), backward=None) -> Node:
        for p in parents:
            if p.tape is not self:
                raise ContractError(f"{op}: operand belongs to a different tape")
        requires_grad = backward is not None and any(p.requires_grad for p in parents)
        node = Node(self, len(self.nodes), value, op, tuple(p.id for p in parents),
                    requires_grad, backward if requires_grad else None)
        self.nodes.append(node)
        return node

    def constant(self, value, name: str = "constant") -> Node:
        return self._push(as_matrix(value, name), "const")

    def parameter(self, value, name: str = "parameter") -> Node:
        node = self._push(as_matrix(value, name), "param")
        node.requires_grad = True
        self.parameters.add(node.id)
        return node

    def backward(self, loss: Node) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(node) for every node; return the parameter gradients."""
        if loss.tape is not self:
            raise ContractError("loss node is not on this tape")
        if loss.shape != (1, 1):
            raise ContractError(f"backward needs a 1x1 loss, got shape {loss.shape}")
        if self._consumed:
            raise ContractError("backward already ran on this tape; build a new tape per step")
        self._consumed = True
        loss._grad = np.ones((1, 1))
        for node in reversed(self.nodes[: loss.id + 1]):
            if node._grad is None or node._backward is None:
                continue
            parent_grads = node._backward(node._grad)
            for pid, g in zip(node.parents, parent_grads):
                parent = self.nodes[pid]
                if g is None or not parent.requires_grad:
                    continue
                if parent._grad is None:
                    parent._grad = np.array(g, dtype=np.float64)
                else:
                    parent._grad = parent._grad + g
        return {pid: self.nodes[pid].grad for pid in sorted(self.parameters)}


def _check_same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _sum_to(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0, keepdims=True)


def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value
    return a.tape._push(av @ bv, "matmul", (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a: Node, b: Node) -> Node:
    """Element-wise sum. ``b`` may also be a 1 x cols row broadcast over ``a``'s rows."""
    if a.shape != b.shape and not (b.shape[0] == 1 and b.shape[1] == a.shape[1]):
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not conform")
    bshape = b.shape
    return a.tape._push(a.value + b.value, "add", (a, b), lambda g: (g, _sum_to(g, bshape)))


def add_const(a: Node, c: np.ndarray) -> Node:
    """Add a constant matrix (or broadcast row) that takes no gradient."""
    c = np.asarray(c, dtype=np.float64)
    try:
        out = a.value + c
    except ValueError:
        raise DimensionError(f"add_const: shapes {a.shape} and {c.shape} do not conform") from None
    if out.shape != a.shape:
        raise DimensionError(f"add_const: shapes {a.shape} and {c.shape} do not conform")
    return a.tape._push(out, "add_const", (a,), lambda g: (g,))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return a.tape._push(a.value * c, "scale", (a,), lambda g: (g * c,))


def transpose(a: Node) -> Node:
    return a.tape._push(a.value.T.copy(), "transpose", (a,), lambda g: (g.T,))


def relu(a: Node) -> Node:
    on = a.value > 0
    return a.tape._push(np.where(on, a.value, 0.0), "relu", (a,), lambda g: (g * on,))


def row_softmax(a: Node) -> Node:
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return a.tape._push(y, "row_softmax", (a,), back)


def mul(a: Node, b: Node) -> Node:
    _check_same_shape("mul", a, b)
    av, bv = a.value, b.value
    return a.tape._push(av * bv, "mul", (a, b), lambda g: (g * bv, g * av))


def mul_cols(a: Node, v: Node) -> Node:
    """Scale column j of ``a`` by ``v[0, j]`` (``a @ diag(v)``)."""
    if v.shape != (1, a.shape[1]):
        raise DimensionError(f"mul_cols: need a 1x{a.shape[1]} row, got {v.shape}")
    av, vv = a.value, v.value
    return a.tape._push(av * vv, "mul_cols", (a, v),
                        lambda g: (g * vv, (g * av).sum(axis=0, keepdims=True)))


def cols(a: Node, start: int, stop: int) -> Node:
    if not 0 <= start < stop <= a.shape[1]:
        raise DimensionError(f"cols: bad slice [{start}:{stop}] of {a.shape}")
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return a.tape._push(a.value[:, start:stop].copy(), "cols", (a,), back)


def hconcat(parts: Sequence[Node]) -> Node:
    if not parts:
        raise DimensionError("hconcat: nothing to concatenate")
    rows = parts[0].shape[0]
    for p in parts:
        if p.shape[0] != rows:
            raise DimensionError(f"hconcat: row counts {rows} and {p.shape[0]} differ")
    edges = np.cumsum([0] + [p.shape[1] for p in parts])

    def back(g):
        return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(parts)))

    return parts[0].tape._push(np.hstack([p.value for p in parts]), "hconcat", tuple(parts), back)


def layer_norm(a: Node, eps: float = LN_EPS) -> Node:
    """Row-wise normalization with unit gain and zero bias."""
    mu = a.value.mean(axis=1, keepdims=True)
    xc = a.value - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv

    def back(g):
        return (inv * (g - g.mean(axis=1, keepdims=True)
                       - xhat * (g * xhat).mean(axis=1, keepdims=True)),)

    return a.tape._push(xhat, "layer_norm", (a,), back)


def sum_all(a: Node) -> Node:
    shape = a.shape
    return a.tape._push(np.array([[a.value.sum()]]), "sum", (a,),
                        lambda g: (np.full(shape, g[0, 0]),))


def mse_loss(pred: Node, target) -> Node:
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise DimensionError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.value - target
    k = 2.0 / diff.size
    return pred.tape._push(np.array([[np.mean(diff * diff)]]), "mse", (pred,),
                           lambda g: (g[0, 0] * k * diff,))


def softmax_cross_entropy(logits: Node, labels) -> Node:
    """Mean negative log-likelihood of integer ``labels`` under row-softmax(logits)."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,) or not np.issubdtype(labels.dtype, np.integer):
        raise InputError(f"labels must be {n} integers, got shape {labels.shape} dtype {labels.dtype}")
    if labels.min() < 0 or labels.max() >= c:
        raise InputError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def back(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (g[0, 0] * d / n,)

    return logits.tape._push(np.array([[loss]]), "xent", (logits,), back)


def frob_norm_sq(a: Node) -> Node:
    av = a.value
    return a.tape._push(np.array([[np.sum(av * av)]]), "frob_sq", (a,),
                        lambda g: (2.0 * g[0, 0] * av,))

