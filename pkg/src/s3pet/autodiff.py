"""Tape-based reverse-mode differentiation over dense float64 tensors.

A ``Tensor`` wraps a numpy array plus an optional gradient slot. Inside a
``with Tape():`` block every operation appends one node to the active
tape; ``Tape.backward`` walks the nodes in reverse append order (which is
a topological order by construction) and accumulates gradients into every
reached tensor whose ``requires_grad`` is set. Gradients sum across
shared subexpressions.

Scope notes:
  * float64 only; no GPU, no operator fusion, no second-order tape.
  * broadcasting is supported for scalar and trailing-dimension cases
    (a lower-rank operand aligns against the trailing axes, and size-1
    axes expand); gradient reduction mirrors the broadcast.
  * ``detach`` is value-transparent and gradient-opaque: the returned
    tensor shares data but no gradient ever flows through the edge.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from s3pet import kernels as K
from s3pet.errors import DimensionError, NumericError

__all__ = [
    "Tensor",
    "Tape",
    "Node",
    "active_tape",
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose_last2",
    "reshape",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "softmax",
    "reduce_sum",
    "reduce_mean",
    "variance",
    "clamp",
    "clamp_min",
    "detach",
    "embedding",
    "index",
    "cross_entropy",
    "layernorm_scale",
    "normalized_by_variance",
    "zero_grad",
    "VAR_FLOOR",
]

# Variance denominators are clamped at this floor so constant rows stay finite.
VAR_FLOOR = 1e-9


class Tensor:
    """Dense float64 value with an attached gradient slot.

    Data is treated as immutable once the tensor participates in a graph;
    only the ``grad`` slot mutates (and optimizer steps rebind ``data`` on
    leaf parameters between steps).
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return detach(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Node:
    """One recorded operation: inputs, output, and the gradient rule."""

    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: Optional[Callable]):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward = backward


_LOCAL = threading.local()


def _stack() -> list:
    s = getattr(_LOCAL, "stack", None)
    if s is None:
        s = _LOCAL.stack = []
    return s


def active_tape() -> Optional["Tape"]:
    s = _stack()
    return s[-1] if s else None


class Tape:
    """Append-only record of operations for one forward/backward pass.

    Reverse traversal of the append order visits every node after all of
    its consumers, so each output gradient is fully accumulated before it
    is pushed to the node's inputs.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _stack().pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(x) into ``x.grad`` for every reached tensor."""
        if loss.data.size != 1:
            raise DimensionError(f"backward from non-scalar of shape {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise NumericError("backward from non-finite loss")
        _accumulate(loss, np.ones_like(loss.data))
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None or node.backward is None:
                continue
            node.backward(g)

    def release(self) -> None:
        """Drop every gradient this tape touched (leaves included)."""
        for node in self.nodes:
            node.output.grad = None
            for t in node.inputs:
                t.grad = None
        self.nodes.clear()


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _record(op: str, inputs: Sequence[Tensor], data: np.ndarray, backward: Optional[Callable]) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.nodes.append(Node(op, inputs, out, backward))
    return out


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def backward(g):
        _accumulate(a, _sum_to_shape(g, a.shape))
        _accumulate(b, _sum_to_shape(g, b.shape))

    return _record("add", (a, b), a.data + b.data, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def backward(g):
        _accumulate(a, _sum_to_shape(g, a.shape))
        _accumulate(b, _sum_to_shape(-g, b.shape))

    return _record("sub", (a, b), a.data - b.data, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def backward(g):
        _accumulate(a, _sum_to_shape(g * b.data, a.shape))
        _accumulate(b, _sum_to_shape(g * a.data, b.shape))

    return _record("mul", (a, b), a.data * b.data, backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")

    def backward(g):
        _accumulate(a, _sum_to_shape(g / b.data, a.shape))
        _accumulate(b, _sum_to_shape(-g * a.data / (b.data * b.data), b.shape))

    return _record("div", (a, b), a.data / b.data, backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return _record("neg", (a,), -a.data, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; stacked (batched) operands broadcast on leading axes.

    Gradients: dA = G @ B^T, dB = A^T @ G, each reduced over broadcast
    batch axes.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    def backward(g):
        _accumulate(a, _sum_to_shape(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        _accumulate(b, _sum_to_shape(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _record("matmul", (a, b), np.matmul(a.data, b.data), backward)


def transpose_last2(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise DimensionError(f"transpose_last2 needs >=2-d, got {a.shape}")

    def backward(g):
        _accumulate(a, np.swapaxes(g, -1, -2))

    return _record("transpose", (a,), np.swapaxes(a.data, -1, -2).copy(), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _record("reshape", (a,), a.data.reshape(shape).copy(), backward)


def sigmoid(a: Tensor) -> Tensor:
    y = K.sigmoid_forward(a.data)

    def backward(g):
        _accumulate(a, K.sigmoid_backward(y, g))

    return _record("sigmoid", (a,), y, backward)


def relu(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, K.relu_backward(a.data, g))

    return _record("relu", (a,), K.relu_forward(a.data), backward)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * y)

    return _record("exp", (a,), y, backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g / a.data)

    return _record("log", (a,), np.log(a.data), backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    y = K.softmax_forward(a.data)

    def backward(g):
        _accumulate(a, K.softmax_backward(y, g))

    return _record("softmax", (a,), y, backward)


def _restore_axes(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        _accumulate(a, _restore_axes(g, a.shape, axis, keepdims))

    return _record("sum", (a,), np.sum(a.data, axis=axis, keepdims=keepdims), backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]

    def backward(g):
        _accumulate(a, np.broadcast_to(_restore_axes(g, a.shape, axis, keepdims), a.shape) / count)

    return _record("mean", (a,), np.mean(a.data, axis=axis, keepdims=keepdims), backward)


def variance(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Population variance along one axis; d var/dx = 2(x - mean)/n."""
    m = np.mean(a.data, axis=axis, keepdims=True)
    centered = a.data - m
    n = a.shape[axis]

    def backward(g):
        _accumulate(a, _restore_axes(g, a.shape, axis, keepdims) * (2.0 / n) * centered)

    return _record("variance", (a,), np.var(a.data, axis=axis, keepdims=keepdims), backward)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient passes only through unclipped entries."""
    inside = (a.data > lo) & (a.data < hi)

    def backward(g):
        _accumulate(a, np.where(inside, g, 0.0))

    return _record("clamp", (a,), np.clip(a.data, lo, hi), backward)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    inside = a.data > lo

    def backward(g):
        _accumulate(a, np.where(inside, g, 0.0))

    return _record("clamp_min", (a,), np.maximum(a.data, lo), backward)


def detach(a: Tensor) -> Tensor:
    """Same value, no gradient path. The recorded node propagates nothing."""
    out = Tensor(a.data)
    tape = active_tape()
    if tape is not None and a.requires_grad:
        tape.nodes.append(Node("detach", (a,), out, None))
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...]]; gradient scatter-adds rows."""
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or ids.max(initial=-1) >= table.shape[0]:
        raise DimensionError(f"embedding ids out of range [0, {table.shape[0]})")

    def backward(g):
        if not table.requires_grad:
            return
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accumulate(table, gt)

    return _record("embedding", (table,), table.data[ids], backward)


def index(a: Tensor, i: int) -> Tensor:
    """Select one element of a vector as a 0-d tensor."""
    if a.ndim != 1:
        raise DimensionError(f"index expects a vector, got {a.shape}")

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[i] = g
        _accumulate(a, ga)

    return _record("index", (a,), np.asarray(a.data[i]), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets over the last axis.

    Accepts logits of shape (..., v); targets of the matching leading
    shape. Log-softmax is computed max-shifted, so saturated logits stay
    finite.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy targets {targets.shape} do not match logits {logits.shape}")
    flat = logits.data.reshape(-1, logits.shape[-1])
    tflat = targets.reshape(-1)
    loss, probs = K.cross_entropy_forward(flat, tflat)

    def backward(g):
        gl = K.cross_entropy_backward(probs, tflat, float(g))
        _accumulate(logits, gl.reshape(logits.shape))

    return _record("cross_entropy", (logits,), np.asarray(loss), backward)


def normalized_by_variance(h: Tensor, floor: float = VAR_FLOOR) -> Tensor:
    """h divided rowwise by its (clamped) last-axis variance.

    Note: the denominator is the variance itself, not the standard
    deviation, and no mean is subtracted. This matches the layer-norm
    variant the backbone uses throughout.
    """
    v = variance(h, axis=-1, keepdims=True)
    return div(h, clamp_min(v, floor))


def layernorm_scale(h: Tensor, s: Tensor, b: Tensor, floor: float = VAR_FLOOR) -> Tensor:
    """Variance-normalized affine map: (h / var(h)) * s + b.

    The variance floor keeps degenerate constant rows finite; s and b
    broadcast over the trailing axis.
    """
    return add(mul(normalized_by_variance(h, floor), s), b)


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None
