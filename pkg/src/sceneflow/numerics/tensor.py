"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation that touches a tensor with ``requires_grad`` records a node
(its parents plus a closure mapping the output gradient to parent gradients).
Nodes carry a global creation sequence number; :func:`backward` replays the
reachable nodes in decreasing sequence order, which is a valid reverse
topological order and fixes the gradient accumulation order.

Broadcasting rule: binary elementwise ops follow numpy broadcasting and
reduce gradients back onto each operand's shape. No other op broadcasts.
"""

from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np

from ..errors import NonFiniteError, ShapeError

DTYPE = np.float64

_sequence = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable node recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq", "_op")
    __array_ufunc__ = None  # make ndarray (op) Tensor defer to the reflected Tensor op

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._seq = next(_sequence)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    out = Tensor.__new__(Tensor)
    out.data = data if type(data) is np.ndarray else np.asarray(data, dtype=DTYPE)
    out.grad = None
    out.name = None
    out._op = op
    record = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = record
    if record:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    out._seq = next(_sequence)
    return out


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _check_finite(a.data / b.data, "div")

    def bw(g):
        gb = g / b.data
        return (
            _unbroadcast(gb, a.shape) if a.requires_grad else None,
            _unbroadcast(-gb * out, b.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), bw, "div")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = _check_finite(np.exp(a.data), "exp")
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _check_finite(np.log(a.data), "log")
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = _check_finite(np.sqrt(a.data), "sqrt")
    return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def absolute(a):
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def power(a, p):
    """``a ** p`` for positive ``a``; ``p`` may be a scalar tensor."""
    a = as_tensor(a)
    if not isinstance(p, Tensor):
        pv = float(p)
        with np.errstate(all="ignore"):
            out = _check_finite(a.data**pv, "power")
        return _make(out, (a,), lambda g: (g * pv * a.data ** (pv - 1.0),), "power")
    if p.size != 1:
        raise ShapeError(f"power: exponent must be scalar, got shape {p.shape}")
    pv = p.data.reshape(())
    with np.errstate(all="ignore"):
        out = _check_finite(a.data**pv, "power")

    def bw(g):
        ga = g * pv * out / a.data if a.requires_grad else None
        gp = None
        if p.requires_grad:
            gp = np.sum(g * out * np.log(a.data)).reshape(p.shape)
        return ga, gp

    return _make(out, (a, p), bw, "power")


def clamp_min(a, floor):
    """Elementwise ``max(a, floor)`` for a constant floor."""
    a = as_tensor(a)
    keep = a.data > floor
    return _make(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,), "clamp_min")


def fill_nonpositive(a, value):
    """Elementwise ``a`` where ``a > 0``, else the constant ``value``."""
    a = as_tensor(a)
    keep = a.data > 0
    return _make(np.where(keep, a.data, value), (a,), lambda g: (g * keep,), "fill_nonpositive")


def leaky_relu(x, negative_slope=0.1):
    """Elementwise ``max(x, negative_slope * x)``."""
    if not 0.0 < negative_slope < 1.0:
        raise ValueError(f"negative_slope must lie in (0, 1), got {negative_slope}")
    x = as_tensor(x)
    pos = x.data > 0
    scale = np.where(pos, 1.0, negative_slope)
    return _make(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


# ------------------------------------------------------------------- linear


def matmul(a, b):
    """``a @ b``.

    ``b`` is a matrix (leading axes of ``a`` are batch axes), or ``a`` is a
    matrix and ``b`` a vector.
    """
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim == 1 and a.ndim == 2 and a.shape[1] == b.shape[0]:
        def bw_vec(g):
            return (
                np.outer(g, b.data) if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None,
            )

        return _make(a.data @ b.data, (a, b), bw_vec, "matmul")
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.outer(a.data, g)
            else:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            i != ax and m != n for i, (m, n) in enumerate(zip(t.shape, ref))
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} disagree off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        parts = np.split(g, bounds, axis=ax)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return _make(out, tuple(tensors), bw, "concat")


def _scatter_rows(g, idx, n_rows, row_shape):
    """Sum rows of ``g`` (``idx.size`` x row) into ``n_rows`` buckets, in index order."""
    width = int(np.prod(row_shape, dtype=np.int64)) if row_shape else 1
    flat_idx = idx.reshape(-1)
    gg = g.reshape(flat_idx.size, width)
    if width == 1:
        res = np.bincount(flat_idx, weights=gg[:, 0], minlength=n_rows)
    else:
        cols = (flat_idx[:, None] * width + np.arange(width)).reshape(-1)
        res = np.bincount(cols, weights=gg.reshape(-1), minlength=n_rows * width)
    return res.reshape((n_rows,) + tuple(row_shape))


def gather_rows(a, idx):
    """Rows of ``a`` selected by an integer array of any shape."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise ShapeError(f"gather_rows: indices must be integers, got {idx.dtype}")
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"gather_rows: index out of range for {n} rows (shape {a.shape})")
    out = a.data[idx]
    return _make(out, (a,), lambda g: (_scatter_rows(g, idx, n, a.shape[1:]),), "gather_rows")


def gather_max(a, idx):
    """``out[i] = max_j a[idx[i, j]]`` elementwise over trailing axes.

    Fused gather + max over neighbours; the gradient goes to the first
    (lowest column ``j``) maximiser.
    """
    a = as_tensor(a)
    idx = np.asarray(idx)
    if idx.ndim != 2 or a.ndim != 2:
        raise ShapeError(f"gather_max: expected matrix and index matrix, got {a.shape}, {idx.shape}")
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"gather_max: index out of range for {n} rows")
    gathered = a.data[idx]  # N x k x C
    best = gathered.max(axis=1)
    k = idx.shape[1]
    # first maximiser on ties: the largest descending weight among the maxima
    wt = np.arange(k, 0, -1, dtype=np.uint8 if k < 256 else np.int64)[None, :, None]
    hit = (gathered == best[:, None, :]).astype(wt.dtype)
    arg = k - (hit * wt).max(axis=1).astype(np.int64) if k else np.zeros(best.shape, np.int64)
    src = np.take_along_axis(idx, arg, axis=1) if idx.shape[0] else arg

    def bw(g):
        width = a.shape[1]
        cols = (src * width + np.arange(width)).reshape(-1)
        return (np.bincount(cols, weights=g.reshape(-1), minlength=n * width).reshape(a.shape),)

    return _make(best, (a,), bw, "gather_max")


def getitem(a, index):
    a = as_tensor(a)
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, dtype=DTYPE), (a,), bw, "getitem")


# --------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    axes = _norm_axis(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=DTYPE), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = int(np.prod([a.shape[ax] for ax in _norm_axis(axis, a.ndim)], dtype=np.int64))
    return reduce_sum(a, axis, keepdims) * (1.0 / count)


def reduce_max(a, axis):
    """Maximum along one axis; the gradient goes to the lowest-index maximiser."""
    a = as_tensor(a)
    ax = axis % a.ndim
    arg = np.argmax(a.data, axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(arg, ax), axis=ax).squeeze(ax)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(arg, ax), np.expand_dims(g, ax), axis=ax)
        return (full,)

    return _make(out, (a,), bw, "max")


def l2_normalize(a, axis=-1, floor=1e-12):
    """``a / max(||a||, floor)`` along ``axis``; all-zero slices stay zero."""
    a = as_tensor(a)
    norm = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    safe = np.maximum(norm, floor)
    out = a.data / safe
    big = norm > floor

    def bw(g):
        proj = np.sum(g * out, axis=axis, keepdims=True)
        return (np.where(big, (g - out * proj) / safe, g / safe),)

    return _make(out, (a,), bw, "l2_normalize")


# ------------------------------------------------------------------ backward


def backward(root: Tensor) -> None:
    """Populate ``.grad`` of every leaf tensor reachable from a scalar ``root``.

    Leaf gradients accumulate into existing ``.grad`` arrays.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    seen = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    tape = sorted(seen.values(), key=lambda t: t._seq, reverse=True)
    grads = {id(root): np.ones_like(root.data)}
    for t in tape:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
