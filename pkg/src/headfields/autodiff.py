"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray and records the primitive that produced it
(inputs plus a vector-Jacobian callback). Calling ``backward`` on a scalar
root walks the recorded graph once in reverse topological order and
accumulates gradients additively at fan-out points.

Conventions baked into the primitives:
  * ReLU / maximum use subgradient 0 at the kink.
  * LeakyReLU slope is 0.01.
  * abs has subgradient 0 at 0 (via np.sign).
Arrays of any float dtype are supported; ops inherit the numpy result
dtype, so float32 graphs stay float32.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

LEAKY_SLOPE = 0.01

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Node in the computation graph; wraps a numpy array."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, value, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64) if not isinstance(
            value, np.ndarray) else value
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, dtype={self.value.dtype}, requires_grad={self.requires_grad})"

    # operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(value, dtype=np.float64):
    """Leaf tensor that collects gradients."""
    return Tensor(np.array(value, dtype=dtype), requires_grad=True)


def constant(value, dtype=None):
    arr = np.asarray(value)
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return Tensor(arr)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.value.dtype if isinstance(like, Tensor) else None
    arr = np.asarray(x)
    if dtype is not None and arr.dtype != dtype and np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(dtype)
    return Tensor(arr)


def value_of(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x)


def _record(value, parents, vjp):
    out = Tensor(value)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- arithmetic primitives -------------------------------------------


def add(a, b):
    a, b = as_tensor(a, like=b if isinstance(b, Tensor) else None), as_tensor(b, like=a if isinstance(a, Tensor) else None)
    val = a.value + b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return _record(val, (a, b), vjp)


def sub(a, b):
    a, b = as_tensor(a, like=b if isinstance(b, Tensor) else None), as_tensor(b, like=a if isinstance(a, Tensor) else None)
    val = a.value - b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return _record(val, (a, b), vjp)


def mul(a, b):
    a, b = as_tensor(a, like=b if isinstance(b, Tensor) else None), as_tensor(b, like=a if isinstance(a, Tensor) else None)
    val = a.value * b.value

    def vjp(g):
        return (_unbroadcast(g * b.value, a.value.shape),
                _unbroadcast(g * a.value, b.value.shape))

    return _record(val, (a, b), vjp)


def div(a, b):
    a, b = as_tensor(a, like=b if isinstance(b, Tensor) else None), as_tensor(b, like=a if isinstance(a, Tensor) else None)
    val = a.value / b.value

    def vjp(g):
        ga = g / b.value
        gb = -g * a.value / (b.value * b.value)
        return _unbroadcast(ga, a.value.shape), _unbroadcast(gb, b.value.shape)

    return _record(val, (a, b), vjp)


def neg(a):
    a = as_tensor(a)
    return _record(-a.value, (a,), lambda g: (-g,))


def power(a, k):
    """Elementwise a**k for a constant scalar exponent k."""
    a = as_tensor(a)
    val = a.value ** k

    def vjp(g):
        return (g * k * a.value ** (k - 1),)

    return _record(val, (a,), vjp)


def exp(a):
    a = as_tensor(a)
    val = np.exp(a.value)
    return _record(val, (a,), lambda g: (g * val,))


def log(a):
    a = as_tensor(a)
    return _record(np.log(a.value), (a,), lambda g: (g / a.value,))


def sqrt(a):
    a = as_tensor(a)
    val = np.sqrt(a.value)
    return _record(val, (a,), lambda g: (g * (0.5 / val),))


def sin(a):
    a = as_tensor(a)
    return _record(np.sin(a.value), (a,), lambda g: (g * np.cos(a.value),))


def cos(a):
    a = as_tensor(a)
    return _record(np.cos(a.value), (a,), lambda g: (-g * np.sin(a.value),))


def absolute(a):
    a = as_tensor(a)
    return _record(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),))


def maximum(a, other):
    """Elementwise max against a constant (scalar or array)."""
    a = as_tensor(a)
    c = np.asarray(other)
    val = np.maximum(a.value, c)
    mask = a.value > c  # ties take the constant branch: subgradient 0

    def vjp(g):
        return (g * mask,)

    return _record(val, (a,), vjp)


def relu(a):
    a = as_tensor(a)
    mask = a.value > 0
    return _record(a.value * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a, slope=LEAKY_SLOPE):
    a = as_tensor(a)
    pos = a.value > 0
    scale = np.where(pos, 1.0, slope).astype(a.value.dtype)
    return _record(a.value * scale, (a,), lambda g: (g * scale,))


def sigmoid(a):
    a = as_tensor(a)
    val = 1.0 / (1.0 + np.exp(-a.value))
    return _record(val, (a,), lambda g: (g * val * (1.0 - val),))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    val = a.value @ b.value

    def vjp(g):
        return g @ b.value.T, a.value.T @ g

    return _record(val, (a, b), vjp)


# -- shape / gather primitives ---------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    old = a.value.shape
    return _record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    val = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = [t.value.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(val, tuple(tensors), vjp)


def stack_last(tensors):
    """Stack equally-shaped tensors along a new trailing axis."""
    tensors = [as_tensor(t) for t in tensors]
    val = np.stack([t.value for t in tensors], axis=-1)

    def vjp(g):
        return tuple(g[..., i] for i in range(len(tensors)))

    return _record(val, tuple(tensors), vjp)


def take_rows(a, idx):
    """Gather rows (axis 0) by an integer index array; backward scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    val = a.value[idx]
    shape = a.value.shape

    def vjp(g):
        return (_scatter_add_rows(g, idx, shape),)

    return _record(val, (a,), vjp)


def _scatter_add_rows(g, idx, shape):
    """out[idx] += g for row indices, via bincount (much faster than add.at)."""
    out_rows = shape[0]
    cols = int(np.prod(shape[1:], dtype=np.int64)) if len(shape) > 1 else 1
    if cols == 1 and len(shape) == 1:
        flat = np.bincount(idx.ravel(), weights=g.ravel(), minlength=out_rows)
        return flat.astype(g.dtype, copy=False)
    offsets = np.arange(cols, dtype=np.int64)
    flat_idx = (idx.reshape(-1, 1) * cols + offsets).ravel()
    flat = np.bincount(flat_idx, weights=g.reshape(-1, cols).ravel(),
                       minlength=out_rows * cols)
    return flat.astype(g.dtype, copy=False).reshape(shape)


def index_add(base, idx, vals):
    """base with vals scatter-added into rows idx (functional, recorded)."""
    base, vals = as_tensor(base), as_tensor(vals)
    idx = np.asarray(idx)
    val = base.value.copy()
    np.add.at(val, idx, vals.value)

    def vjp(g):
        return g, g[idx]

    return _record(val, (base, vals), vjp)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    val = a.value.sum(axis=axis, keepdims=keepdims)
    shape = a.value.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(g.dtype, copy=False),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, shape).astype(g.dtype, copy=False),)

    return _record(val, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def cumsum(a, axis=-1):
    a = as_tensor(a)
    val = np.cumsum(a.value, axis=axis)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return _record(val, (a,), vjp)


def broadcast_rows(vec, n):
    """Tile a 1-D tensor into n identical rows; backward sums over rows."""
    vec = as_tensor(vec)
    val = np.broadcast_to(vec.value, (n,) + vec.value.shape).copy()

    def vjp(g):
        return (g.sum(axis=0),)

    return _record(val, (vec,), vjp)


def getitem(a, key):
    """Basic (non-fancy) slicing; backward writes into the slice."""
    a = as_tensor(a)
    val = a.value[key]
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[key] = g
        return (out,)

    return _record(val, (a,), vjp)


# -- composite helpers ------------------------------------------------


def l2norm_rows(a, eps=1e-12):
    """Row-wise Euclidean norm, smoothed at 0 so the gradient stays finite."""
    return sqrt(add(tsum(mul(a, a), axis=-1), eps))


def dot(a, b):
    return tsum(mul(a, b))


def linear(x, w, b):
    return add(matmul(x, w), b)


# -- backward pass -----------------------------------------------------


def backward(root):
    """Accumulate gradients of a scalar `root` into every reachable leaf.

    Visits each recorded node exactly once in reverse topological order.
    Raises on non-scalar roots.
    """
    if root.value.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.value.shape}")
    if not root.requires_grad:
        return

    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)

    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for p, g in zip(node._parents, grads):
            if not p.requires_grad or g is None:
                continue
            if g.dtype != p.value.dtype:
                g = g.astype(p.value.dtype)
            p.grad = g if p.grad is None else p.grad + g
