"""A small dense tensor with reverse-mode automatic differentiation.

Tensors wrap a float32 or float64 numpy array. Any op whose inputs include a
tensor with ``requires_grad`` records a node (its parents plus a closure that
maps the output gradient to parent gradients); :func:`backward` walks those
nodes in reverse topological order. Every op output is checked for NaN/Inf.
"""
from __future__ import annotations

import numpy as np

from . import kernels

__all__ = [
    "Tensor", "ShapeError", "DTypeError", "NonFiniteError", "TapeError",
    "tensor", "zeros", "ones", "backward", "no_grad",
    "add", "sub", "mul", "div", "neg", "power", "matmul",
    "exp", "log", "sqrt", "tanh", "relu", "clip",
    "sum", "mean", "reshape", "transpose", "broadcast_to", "concat",
    "softmax", "conv2d", "avg_pool2d", "upsample2d",
]

_DTYPES = {"f32": np.float32, "f64": np.float64}
_GRAD_ENABLED = [True]


class ShapeError(ValueError):
    pass


class DTypeError(TypeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev


def _as_dtype(dtype):
    if dtype is None:
        return None
    if isinstance(dtype, str):
        try:
            return np.dtype(_DTYPES[dtype])
        except KeyError:
            raise DTypeError(f"unknown dtype {dtype!r}") from None
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise DTypeError(f"unsupported dtype {dtype}")
    return dtype


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, dtype=None, requires_grad=False, name=None):
        dtype = _as_dtype(dtype)
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.dtype(np.float64)
        arr = np.asarray(arr, dtype=dtype)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def astype(self, dtype):
        return Tensor(self.data.astype(_as_dtype(dtype)), requires_grad=False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __hash__(self):
        return id(self)

    def __eq__(self, other):  # identity semantics; tensors are graph nodes
        return self is other

    def __len__(self):
        return self.shape[0]

    # -- operator sugar -------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, dtype=None, requires_grad=False, name=None):
    return Tensor(data, dtype=dtype, requires_grad=requires_grad, name=name)


def zeros(shape, dtype="f64", requires_grad=False):
    return Tensor(np.zeros(shape, dtype=_as_dtype(dtype)), requires_grad=requires_grad)


def ones(shape, dtype="f64", requires_grad=False):
    return Tensor(np.ones(shape, dtype=_as_dtype(dtype)), requires_grad=requires_grad)


# -- graph plumbing -----------------------------------------------------------

def _lift(x, like):
    """Turn python scalars / arrays into constant tensors of ``like``'s dtype."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _pair(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a) if not isinstance(b, Tensor) else b
    if a.dtype != b.dtype:
        raise DTypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a, b


def _make(data, parents, backward_fn, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor(data)
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    out.op = op
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
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


def backward(loss):
    """Backpropagate from a scalar ``loss``.

    Returns a dict mapping every tracked leaf tensor to its gradient (as a
    Tensor). Leaves that do not require grad never appear.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("loss must be a Tensor")
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss is not on the tape (no input requires grad)")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return {leaf: Tensor(np.asarray(g, dtype=leaf.dtype)) for leaf, g in leaves.items()}


# -- elementwise ----------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw, "div")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p):
    if isinstance(p, Tensor):
        raise TypeError("only scalar exponents are supported")
    p = float(p)
    out = a.data ** a.dtype.type(p)

    def bw(g):
        return (g * a.dtype.type(p) * a.data ** a.dtype.type(p - 1),)

    return _make(out, (a,), bw, "pow")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * a.dtype.type(0.5) / out,), "sqrt")


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def relu(a):
    mask = a.data > 0
    return _make(np.where(mask, a.data, a.dtype.type(0)), (a,), lambda g: (g * mask,), "relu")


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    inside = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi).astype(a.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * inside,), "clip")


# -- reductions and shape ops --------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / a.dtype.type(count), a.shape).copy(),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), bw, "mean")


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    # contiguous copies keep later reductions independent of memory layout
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def broadcast_to(a, shape):
    out = np.broadcast_to(a.data, shape).copy()
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def getitem(a, idx):
    if isinstance(idx, Tensor):
        idx = idx.data

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(a.data[idx]), (a,), bw, "getitem")


def concat(tensors, axis=0):
    tensors = list(tensors)
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) != 1:
        raise DTypeError(f"dtype mismatch in concat: {dtypes}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


# -- linear algebra -------------------------------------------------------------

def matmul(a, b):
    """Matrix product with numpy batch broadcasting; both operands at least 2-D."""
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError("matmul operands must be Tensors")
    if a.dtype != b.dtype:
        raise DTypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner extents differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


# -- convolution and resampling -------------------------------------------------

def conv2d(x, w, b=None, stride=1, pad=0):
    """2-D cross-correlation. x: (B, C, H, W), w: (O, C, k, k), b: (O,)."""
    if x.dtype != w.dtype or (b is not None and b.dtype != x.dtype):
        raise DTypeError("conv2d operands must share a dtype")
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    bsz, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if cw != c or kh != kw:
        raise ShapeError(f"weight {w.shape} incompatible with input {x.shape}")
    k = kh
    if k > h + 2 * pad or k > wd + 2 * pad:
        raise ShapeError(f"kernel {k} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1

    cols = kernels.im2col(x.data, k, stride, pad)  # (B, C*k*k, Ho*Wo)
    wmat = w.data.reshape(o, -1)
    out = np.matmul(wmat, cols)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(bsz, o, ho, wo)

    def bw(g):
        g2 = g.reshape(bsz, o, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2)
            gx = kernels.col2im(gcols, x.shape, k, stride, pad)
        if w.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=(0, 2))
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw, "conv2d")


def avg_pool2d(x, size=2):
    bsz, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by {size}")
    out = x.data.reshape(bsz, c, h // size, size, w // size, size).mean(axis=(3, 5))
    scale = x.dtype.type(1.0 / (size * size))

    def bw(g):
        g = np.repeat(np.repeat(g, size, axis=2), size, axis=3)
        return (g * scale,)

    return _make(out, (x,), bw, "avg_pool2d")


def upsample2d(x, scale=2):
    """Nearest-neighbour upsampling by an integer factor."""
    bsz, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, scale, axis=2), scale, axis=3)

    def bw(g):
        return (g.reshape(bsz, c, h, scale, w, scale).sum(axis=(3, 5)),)

    return _make(out, (x,), bw, "upsample2d")
