"""Dense float64 tensors with reverse-mode differentiation.

Every op takes :class:`Node` inputs and returns a new :class:`Node` whose
value is a float64 ndarray. Nodes that depend on a trainable leaf carry a
backward closure; everything else is a constant and costs nothing extra.

    >>> x = variable([1.0, 2.0, 3.0])
    >>> loss = sum_(x * x)
    >>> backward(loss)
    >>> x.grad
    array([2., 4., 6.])
"""

from __future__ import annotations

import contextlib
import contextvars
import enum
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)


class ShapeError(ValueError):
    """Raised when operand shapes are illegal for an op."""


class Op(str, enum.Enum):
    LEAF = "leaf"
    MATMUL = "matmul"
    ADD = "add"
    MUL = "mul"
    SCALE = "scale"
    CONCAT = "concat"
    SLICE = "slice"
    RELU = "relu"
    GELU = "gelu"
    SOFTMAX = "softmax"
    LOG_SOFTMAX = "log_softmax"
    LAYER_NORM = "layer_norm"
    EMBEDDING = "embedding"
    MEAN = "mean"
    SUM = "sum"
    TRANSPOSE = "transpose"
    RESHAPE = "reshape"
    BROADCAST = "broadcast"
    ATTENTION = "attention"
    L2_NORMALIZE = "l2_normalize"
    LOG = "log"
    NEGATE = "negate"
    CROSS_ENTROPY = "cross_entropy"


class Node:
    """A value in the computation graph.

    ``parents`` is always recorded; ``grad`` is only ever populated on nodes
    with ``requires_grad`` set, i.e. those downstream of a trainable leaf.
    """

    __slots__ = ("value", "op", "parents", "grad", "requires_grad", "_backward")

    def __init__(self, value, op: Op = Op.LEAF, parents: tuple = (),
                 requires_grad: bool = False, backward_fn=None):
        arr = np.asarray(value, dtype=np.float64)
        if arr.size == 0:
            raise ShapeError(f"empty tensor of shape {arr.shape} rejected")
        self.value = arr
        self.op = op
        self.parents = tuple(parents)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def __repr__(self) -> str:
        return f"Node(op={self.op.value}, shape={self.shape})"

    def __add__(self, other):
        return add(self, _as_node(other))

    def __radd__(self, other):
        return add(_as_node(other), self)

    def __sub__(self, other):
        return add(self, negate(_as_node(other)))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_node(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _as_node(other))

    def __neg__(self):
        return negate(self)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def constant(data) -> Node:
    return Node(data)


def variable(data) -> Node:
    """A free leaf that accumulates gradient (handy in tests and oracles)."""
    return Node(data, requires_grad=True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build graphs without backward closures (inference only)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def _result(value, op: Op, parents: Sequence[Node], backward_fn) -> Node:
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"{op.value} produced non-finite values")
    track = _grad_enabled.get() and any(p.requires_grad for p in parents)
    return Node(value, op, tuple(parents), track, backward_fn if track else None)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Node, b: Node) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


# --- arithmetic ----------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    A, B = a.value, b.value
    inner_b = B.shape[0] if B.ndim == 1 else B.shape[-2]
    if A.ndim == 0 or B.ndim == 0 or A.shape[-1] != inner_b:
        raise ShapeError(f"matmul: shapes {A.shape} and {B.shape} are incompatible")
    if A.ndim > 2 and B.ndim > 2:
        try:
            np.broadcast_shapes(A.shape[:-2], B.shape[:-2])
        except ValueError:
            raise ShapeError(f"matmul: batch dims of {A.shape} and {B.shape} differ") from None

    def back(g):
        A2 = A[None, :] if A.ndim == 1 else A
        B2 = B[:, None] if B.ndim == 1 else B
        g2 = g
        if A.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if B.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(B2, -1, -2)
        gb = np.swapaxes(A2, -1, -2) @ g2
        if A.ndim == 1:
            ga = ga.squeeze(-2)
        if B.ndim == 1:
            gb = gb.squeeze(-1)
        return _unbroadcast(ga, A.shape), _unbroadcast(gb, B.shape)

    return _result(A @ B, Op.MATMUL, (a, b), back)


def add(a: Node, b: Node) -> Node:
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.value + b.value, Op.ADD, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Node, b: Node) -> Node:
    _broadcast_shape("mul", a, b)
    A, B = a.value, b.value
    return _result(A * B, Op.MUL, (a, b),
                   lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _result(a.value * c, Op.SCALE, (a,), lambda g: (g * c,))


def negate(a: Node) -> Node:
    return _result(-a.value, Op.NEGATE, (a,), lambda g: (-g,))


def log(a: Node) -> Node:
    A = a.value
    if np.any(A <= 0):
        raise ValueError("log: input must be strictly positive")
    return _result(np.log(A), Op.LOG, (a,), lambda g: (g / A,))


# --- structural ----------------------------------------------------------

def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    nodes = list(nodes)
    if not nodes:
        raise ShapeError("concat: no inputs")
    ndim = nodes[0].ndim
    ax = _axis(axis, ndim)
    ref = nodes[0].shape
    for n in nodes[1:]:
        s = n.shape
        if len(s) != ndim or s[:ax] + s[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(f"concat axis {axis}: shapes {ref} and {s} are incompatible")
    sizes = [n.shape[ax] for n in nodes]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _result(np.concatenate([n.value for n in nodes], axis=ax), Op.CONCAT, nodes, back)


def slice_axis(a: Node, axis: int, start: int, stop: int) -> Node:
    ax = _axis(axis, a.ndim)
    n = a.shape[ax]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return _result(a.value[index], Op.SLICE, (a,), back)


def transpose(a: Node, axes: Sequence[int] | None = None) -> Node:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.value, axes), Op.TRANSPOSE, (a,),
                   lambda g: (np.transpose(g, inverse),))


def reshape(a: Node, shape: Sequence[int]) -> Node:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.value.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _result(a.value.reshape(shape), Op.RESHAPE, (a,), lambda g: (g.reshape(old),))


def broadcast_to(a: Node, shape: Sequence[int]) -> Node:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.value, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: {a.shape} cannot broadcast to {shape}") from None
    old = a.shape
    return _result(out, Op.BROADCAST, (a,), lambda g: (_unbroadcast(g, old),))


def embedding(table: Node, ids) -> Node:
    """Row lookup ``table[ids]``; ids are constants and carry no gradient."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: ids out of range for {table.shape[0]} rows")
    shape = table.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _result(table.value[ids], Op.EMBEDDING, (table,), back)


# --- reductions ----------------------------------------------------------

def sum_(a: Node, axis: int | None = None, keepdims: bool = False) -> Node:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(a.value.sum(axis=axis, keepdims=keepdims), Op.SUM, (a,), back)


def mean(a: Node, axis: int | None = None, keepdims: bool = False) -> Node:
    count = a.value.size if axis is None else a.shape[axis]
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _result(a.value.mean(axis=axis, keepdims=keepdims), Op.MEAN, (a,), back)


# --- nonlinearities ------------------------------------------------------

def relu(a: Node) -> Node:
    A = a.value
    return _result(np.maximum(A, 0.0), Op.RELU, (a,), lambda g: (g * (A > 0),))


def gelu(a: Node) -> Node:
    """Exact (erf) GELU."""
    A = a.value
    cdf = 0.5 * (1.0 + erf(A / _SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * A * A)
    return _result(A * cdf, Op.GELU, (a,), lambda g: (g * (cdf + A * pdf),))


def _masked_logits(A, temperature, mask):
    z = A / temperature
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    return z


def softmax(a: Node, axis: int = -1, temperature: float = 1.0, mask=None) -> Node:
    """softmax(a / temperature) with max subtraction.

    Positions where ``mask`` is False get probability exactly 0; every slice
    along ``axis`` needs at least one unmasked entry.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    z = _masked_logits(a.value, temperature, mask)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        gz = p * (g - (g * p).sum(axis=axis, keepdims=True))
        return (gz / temperature,)

    return _result(p, Op.SOFTMAX, (a,), back)


def log_softmax(a: Node, axis: int = -1, temperature: float = 1.0) -> Node:
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    z = a.value / temperature
    shifted = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def back(g):
        return ((g - p * g.sum(axis=axis, keepdims=True)) / temperature,)

    return _result(out, Op.LOG_SOFTMAX, (a,), back)


def layer_norm(x: Node, gain: Node, bias: Node, eps: float = 1e-5) -> Node:
    """Normalize over the last axis, then apply gain and bias."""
    w = x.shape[-1]
    if gain.shape != (w,) or bias.shape != (w,):
        raise ShapeError(f"layer_norm: input {x.shape} with gain {gain.shape}, bias {bias.shape}")
    X, G = x.value, gain.value
    mu = X.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(X.var(axis=-1, keepdims=True) + eps)
    xhat = (X - mu) * inv

    def back(g):
        dxhat = g * G
        dx = inv / w * (w * dxhat - dxhat.sum(-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * G + bias.value, Op.LAYER_NORM, (x, gain, bias), back)


def l2_normalize(a: Node, axis: int = -1) -> Node:
    """Unit Euclidean norm along ``axis``; the exact zero vector is rejected."""
    A = a.value
    norm = np.sqrt((A * A).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise ValueError("l2_normalize: zero vector has no direction")
    y = A / norm

    def back(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _result(y, Op.L2_NORMALIZE, (a,), back)


def cross_entropy_from_log_probs(logp: Node, target: int) -> Node:
    """``-logp[target]`` for a 1-D vector of log-probabilities."""
    if logp.ndim != 1:
        raise ShapeError(f"cross_entropy: expected 1-D log-probs, got {logp.shape}")
    if not 0 <= target < logp.shape[0]:
        raise IndexError(f"target {target} out of range for {logp.shape[0]} classes")
    n = logp.shape[0]

    def back(g):
        out = np.zeros(n)
        out[target] = -g
        return (out,)

    return _result(-logp.value[target], Op.CROSS_ENTROPY, (logp,), back)


def attention(q: Node, k: Node, v: Node, mask=None, identity: bool = False) -> Node:
    """Scaled dot-product attention over the last two axes.

    ``mask`` (broadcastable to the score shape) marks attendable keys.
    ``identity`` short-circuits attention so every query reads only its own
    value row; it exists as an isolation hook for tests.
    """
    if identity:
        return v
    scores = scale(matmul(q, transpose(k, _swap_last(k.ndim))), 1.0 / np.sqrt(q.shape[-1]))
    return matmul(softmax(scores, axis=-1, mask=mask), v)


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


_OPS: dict[Op, Callable[..., Node]] = {
    Op.MATMUL: matmul, Op.ADD: add, Op.MUL: mul, Op.SCALE: scale,
    Op.CONCAT: lambda *xs, axis=0: concat(xs, axis), Op.SLICE: slice_axis,
    Op.RELU: relu, Op.GELU: gelu, Op.SOFTMAX: softmax, Op.LOG_SOFTMAX: log_softmax,
    Op.LAYER_NORM: layer_norm, Op.EMBEDDING: embedding, Op.MEAN: mean, Op.SUM: sum_,
    Op.TRANSPOSE: transpose, Op.RESHAPE: reshape, Op.BROADCAST: broadcast_to,
    Op.ATTENTION: attention, Op.L2_NORMALIZE: l2_normalize, Op.LOG: log,
    Op.NEGATE: negate, Op.CROSS_ENTROPY: cross_entropy_from_log_probs,
}


def forward_op(tag: Op | str, *inputs, **attrs) -> Node:
    """Apply the op named by ``tag``; a uniform entry point over the functions above."""
    try:
        fn = _OPS[Op(tag)]
    except (ValueError, KeyError):
        raise ValueError(f"unknown op tag {tag!r}") from None
    return fn(*inputs, **attrs)


# --- backward ------------------------------------------------------------

def _topo_order(root: Node) -> list[Node]:
    order, seen = [], set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Populate ``grad`` on every node that requires it.

    Leaf gradients accumulate across calls; interior gradients are reset so
    calling backward twice on the same graph does not double-count them.
    """
    if loss.value.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for p, g in zip(node.parents, node._backward(node.grad)):
            if g is None or not p.requires_grad:
                continue
            p.grad = g.copy() if p.grad is None else p.grad + g

