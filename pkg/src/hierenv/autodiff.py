"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  Calling
:func:`backward` on a scalar walks that recorded graph in reverse
topological order, accumulating into ``.grad`` of leaf tensors that
require gradients.

Forward ops refuse to produce NaN/Inf: overflow and domain violations
raise :class:`~hierenv.errors.NumericError` instead of propagating.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

__all__ = [
    "Tensor", "tensor", "constant", "backward",
    "matmul", "add", "sub", "mul", "div", "neg", "abs_", "concat", "transpose", "reshape",
    "sigmoid", "relu", "exp", "log", "softmax", "log_softmax", "logsumexp",
    "sum_", "mean", "max_", "l2_normalize", "dropout", "gather_rows", "scatter_symmetric",
    "clip", "detach", "forward_op",
]

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A node in the differentiation graph.

    ``data`` is always a float64 ndarray.  ``grad`` is populated only on
    tensors with ``requires_grad`` that were reached by :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Backward | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar; all routes go through the functional ops below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(values: np.ndarray, kind: str) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"{kind} produced non-finite values")
    return values


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Backward, kind: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _check_finite(np.asarray(data, dtype=np.float64), kind)
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, kind: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise / linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0):
        raise NumericError("div: division by zero")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, ts, bw, "concat")


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; clamped entries pass no gradient."""
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def detach(a) -> Tensor:
    return Tensor(_as_tensor(a).data.copy())


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="raise"):
        try:
            out = np.exp(a.data)
        except FloatingPointError as exc:
            raise NumericError("exp: overflow") from exc
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log: argument must be strictly positive")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def logsumexp(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Stable log-sum-exp along ``axis``; ``mask`` (same shape, bool) restricts the terms.

    Rows whose mask is empty yield 0 and receive no gradient.
    """
    a = _as_tensor(a)
    x = a.data
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"logsumexp: mask shape {mask.shape} != {x.shape}")
    filled = np.where(mask, x, -np.inf)
    m = filled.max(axis=axis, keepdims=True)
    empty = ~np.isfinite(m)
    m = np.where(empty, 0.0, m)
    e = np.where(mask, np.exp(np.where(mask, x - m, 0.0)), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    safe = np.where(empty, 1.0, s)
    out = np.where(empty, 0.0, np.log(safe) + m)
    weights = e / safe

    def bw(g):
        return (np.expand_dims(g, axis) * weights,)

    return _make(np.squeeze(out, axis=axis), (a,), bw, "logsumexp")


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    return axis % ndim


def sum_(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    ax = _norm_axis(axis, a.data.ndim)

    def bw(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw, "sum")


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if a.size == 0:
        raise ContractError("mean of an empty tensor")
    count = a.size if axis is None else a.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def max_(a, axis: int = -1) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal entry."""
    a = _as_tensor(a)
    ax = _norm_axis(axis, a.data.ndim)
    idx = np.argmax(a.data, axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(idx, ax), axis=ax).squeeze(ax)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, ax), np.expand_dims(g, ax), axis=ax)
        return (full,)

    return _make(out, (a,), bw, "max")


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Row-normalize to unit length; norms below ``eps`` are clamped to ``eps``."""
    a = _as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    clamped = norm < eps
    denom = np.where(clamped, eps, norm)
    out = a.data / denom

    def bw(g):
        # d(x/|x|) = (g - y (g.y)) / |x| where the norm is not clamped
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(clamped, g / eps, (g - out * proj) / denom),)

    return _make(out, (a,), bw, "l2_normalize")


# ---------------------------------------------------------------------------
# indexing / stochastic


def gather_rows(a, index: np.ndarray) -> Tensor:
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), bw, "gather_rows")


def scatter_symmetric(values, rows: np.ndarray, cols: np.ndarray, n: int) -> Tensor:
    """Place per-edge ``values`` at (rows, cols) and (cols, rows) of an n x n zero matrix."""
    values = _as_tensor(values)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if values.shape != rows.shape or rows.shape != cols.shape:
        raise ShapeError("scatter_symmetric: values/rows/cols must share a 1-D shape")
    if np.any(rows == cols):
        raise ContractError("scatter_symmetric: diagonal entries are not edges")
    out = np.zeros((n, n))
    out[rows, cols] = values.data
    out[cols, rows] = values.data

    def bw(g):
        return (g[rows, cols] + g[cols, rows],)

    return _make(out, (values,), bw, "scatter_symmetric")


def dropout(a, keep_prob: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout; a no-op when not training or ``keep_prob == 1``."""
    a = _as_tensor(a)
    if not 0.0 < keep_prob <= 1.0:
        raise ContractError(f"dropout keep_prob must be in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return a
    mask = (rng.random(a.shape) < keep_prob) / keep_prob
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "dropout")


_OPS = {
    "matmul": matmul, "add": add, "sub": sub, "mul": mul, "concat": concat,
    "sigmoid": sigmoid, "relu": relu, "exp": exp, "log": log, "softmax": softmax,
    "log_softmax": log_softmax, "mean": mean, "sum": sum_, "max": max_,
    "l2_normalize": l2_normalize, "dropout": dropout,
}


def forward_op(kind: str, *inputs, **params) -> Tensor:
    """Dispatch an op by name (``concat`` takes a single list argument)."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **params)


# ---------------------------------------------------------------------------
# reverse pass


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every reachable leaf that requires gradients.

    Gradients accumulate into existing ``.grad`` arrays.  The recorded
    graph is released afterwards, so a second call on the same loss only
    reaches the loss itself.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)
        node._parents = ()
        node._backward = None
