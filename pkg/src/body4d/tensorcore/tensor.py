"""Tape-based reverse-mode automatic differentiation on numpy storage.

Values are float32 arrays; reductions and matrix products accumulate in
float64 before rounding back to float32. A forward pass records a fresh
tape (the implicit graph formed by node parent links); ``backward`` walks
it once in reverse recording order. Recording is single-writer and there
is no higher-order differentiation.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor", "ShapeMismatch", "tensor", "parameter", "as_tensor",
    "no_grad", "set_debug_checks", "backward",
    "add", "sub", "mul", "neg", "matmul",
    "tsum", "tmean", "tmax", "relu", "tanh", "sigmoid", "tabs", "sqrt",
    "reshape", "transpose", "concat", "narrow", "gather", "stack", "custom",
]


class ShapeMismatch(ValueError):
    """Raised when operand shapes violate an op contract."""


_SEQ = itertools.count()
_GRAD_ENABLED = True
_DEBUG_CHECKS = False


def set_debug_checks(flag: bool) -> None:
    """Toggle finiteness assertions after every op (off by default)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(flag)


@contextmanager
def no_grad():
    """Disable tape recording inside the context (values still computed)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float32 array plus an optional tape node.

    Leaves created with ``requires_grad=True`` are trainable parameters;
    interior nodes carry parent references and a vector-Jacobian closure.
    Node values are immutable by convention; only the optimizer rewrites
    parameter ``data`` between recorded passes.
    """

    __slots__ = ("data", "requires_grad", "name", "_prev", "_vjp", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _prev=(), _vjp=None):
        arr = np.asarray(data, dtype=np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._prev = _prev
        self._vjp = _vjp
        self._seq = next(_SEQ)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _f64(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float64, copy=False)


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32)


def _node(data: np.ndarray, prev: tuple, vjp) -> Tensor:
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by an op")
    if _GRAD_ENABLED and any(p.requires_grad for p in prev):
        return Tensor(data, requires_grad=True, _prev=prev, _vjp=vjp)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    return _f32(g).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _node(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (-g,)

    return _node(-a.data, (a,), vjp)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return _node(a.data * mask, (a,), vjp)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _node(out, (a,), vjp)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign for numeric stability at large |x|
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = _f32(out)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), vjp)


def tabs(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)

    def vjp(g):
        return (g * s,)

    return _node(np.abs(a.data), (a,), vjp)


def sqrt(a) -> Tensor:
    """Elementwise square root; callers guard inputs away from zero."""
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def vjp(g):
        return (g / (2.0 * out),)

    return _node(out, (a,), vjp)


# ---------------------------------------------------------------------------
# matrix product

def matmul(a, b) -> Tensor:
    """Matrix product with float64 accumulation.

    Accepts 1-D vectors on either side and stacked leading batch dims,
    which may broadcast; gradients are summed back over broadcast dims.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeMismatch("matmul requires at least 1-D operands")
    try:
        out = _f32(np.matmul(_f64(a.data), _f64(b.data)))
    except ValueError as e:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}: {e}") from None

    def vjp(g):
        g64 = _f64(g)
        ad, bd = _f64(a.data), _f64(b.data)
        if a.ndim == 1 and b.ndim == 1:
            ga = g64 * bd
            gb = g64 * ad
        elif a.ndim == 1:
            # (k,) @ (..., k, n) -> (..., n)
            ga = np.matmul(bd, np.expand_dims(g64, -1)).squeeze(-1)
            gb = np.expand_dims(ad, -1) * np.expand_dims(g64, -2)
        elif b.ndim == 1:
            # (..., m, k) @ (k,) -> (..., m)
            ga = np.expand_dims(g64, -1) * np.expand_dims(bd, -2)
            gb = np.matmul(np.swapaxes(ad, -1, -2), np.expand_dims(g64, -1)).squeeze(-1)
        else:
            ga = np.matmul(g64, np.swapaxes(bd, -1, -2))
            gb = np.matmul(np.swapaxes(ad, -1, -2), g64)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _node(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# reductions

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axis_tuple(axis, a.ndim)
    out = _f32(np.sum(a.data, axis=axes, keepdims=keepdims, dtype=np.float64))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape).astype(np.float32),)

    return _node(out, (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axis_tuple(axis, a.ndim)
    n = int(np.prod([a.data.shape[i] for i in axes])) if axes else 1
    out = _f32(np.sum(a.data, axis=axes, keepdims=keepdims, dtype=np.float64) / n)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.data.shape).astype(np.float32),)

    return _node(out, (a,), vjp)


def tmax(a, axis: int, keepdims: bool = False) -> Tensor:
    """Max reduction along one axis; the gradient routes to the first
    maximal element (fixed tie-break keeps backward deterministic)."""
    a = as_tensor(a)
    ax = axis % a.ndim
    out = np.max(a.data, axis=ax, keepdims=keepdims)
    idx = np.argmax(a.data, axis=ax)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        z = np.zeros_like(a.data)
        np.put_along_axis(z, np.expand_dims(idx, ax), 1.0, axis=ax)
        return (z * g,)

    return _node(out, (a,), vjp)


# ---------------------------------------------------------------------------
# shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _node(out, (a,), vjp)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def vjp(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _node(out, (a,), vjp)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeMismatch("concat of zero tensors")
    ax = axis % parts[0].ndim if parts[0].ndim else 0
    out = np.concatenate([p.data for p in parts], axis=ax)
    sizes = [p.data.shape[ax] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=ax))

    return _node(out, tuple(parts), vjp)


def stack(parts, axis: int = 0) -> Tensor:
    """Stack equal-shape tensors along a new axis (concat of reshapes)."""
    parts = list(parts)
    shaped = [reshape(as_tensor(p), (1,) + tuple(as_tensor(p).shape)) for p in parts]
    out = concat(shaped, axis=0)
    if axis not in (0, -out.ndim):
        order = list(range(1, out.ndim))
        order.insert(axis % out.ndim, 0)
        out = transpose(out, order)
    return out


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = as_tensor(a)
    ax = axis % a.ndim
    if start < 0 or start + length > a.data.shape[ax]:
        raise ShapeMismatch(
            f"narrow [{start}:{start + length}] out of range for axis {ax} of {a.shape}")
    sl = [slice(None)] * a.ndim
    sl[ax] = slice(start, start + length)
    sl = tuple(sl)
    out = np.ascontiguousarray(a.data[sl])

    def vjp(g):
        z = np.zeros_like(a.data)
        z[sl] = g
        return (z,)

    return _node(out, (a,), vjp)


def gather(a, index) -> Tensor:
    """Select rows along axis 0; backward scatter-adds into the source."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeMismatch("gather index must be 1-D")
    out = np.ascontiguousarray(a.data[idx])

    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _node(out, (a,), vjp)


def custom(out_data: np.ndarray, parents, vjp) -> Tensor:
    """Record an externally computed op with a caller-supplied VJP.

    ``vjp(g)`` must return one gradient array per parent, each matching
    the parent's shape.
    """
    parents = tuple(as_tensor(p) for p in parents)
    return _node(_f32(np.asarray(out_data)), parents, vjp)


# ---------------------------------------------------------------------------
# backward

def backward(loss: Tensor, wrt) -> list[np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Args:
        loss: scalar Tensor (size 1).
        wrt: sequence of leaf tensors to differentiate with respect to.

    Returns:
        One float32 gradient per entry of ``wrt``, shaped like its data;
        zeros for leaves the loss does not reach.
    """
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_ = [loss]
    while stack_:
        t = stack_.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        order.append(t)
        stack_.extend(t._prev)
    order.sort(key=lambda t: t._seq)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        if t._vjp is None:
            continue  # leaf: keep its accumulated gradient
        g = grads.pop(id(t), None)
        if g is None:
            continue
        parent_grads = t._vjp(g)
        for p, pg in zip(t._prev, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = _f32(pg)
            if pg.shape != p.data.shape:
                raise ShapeMismatch(
                    f"vjp produced {pg.shape} for parent of shape {p.data.shape}")
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg

    return [grads.get(id(w), np.zeros_like(w.data)) for w in wrt]
