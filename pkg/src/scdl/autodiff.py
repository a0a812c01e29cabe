"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op computes its value eagerly with numpy and, when any input requires a
gradient, records its parents plus a closure mapping the output gradient to
per-parent gradients.  :meth:`Tensor.backward` walks the recorded graph once in
reverse topological order.
"""
import contextlib

import numpy as np

from . import kernels

COS_EPS = 1e-8

_grad_enabled = True


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them on the graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        data = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(data) if requires_grad else None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # -- properties -------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # -- graph traversal --------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = node.grad + g if node.grad is not None else g.copy()
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

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

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def detach(self):
        return detach(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def back(g):
        ga = g / b.data
        return (_unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape))

    return _result(out, (a, b), back, "div")


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0),)

    return _result(out, (a,), back, "sqrt")


def power(a, exponent):
    """Elementwise ``a ** exponent`` for a constant real exponent."""
    exponent = float(exponent)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = np.power(a.data, exponent)
    return _result(out, (a,),
                   lambda g: (g * exponent * np.power(a.data, exponent - 1.0),), "power")


def relu(a):
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def clamp(a, lo=None, hi=None):
    """Clip values; gradient passes only where the input is strictly inside."""
    lo_v = -np.inf if lo is None else lo
    hi_v = np.inf if hi is None else hi
    mask = (a.data >= lo_v) & (a.data <= hi_v)
    return _result(np.clip(a.data, lo_v, hi_v), (a,), lambda g: (g * mask,), "clamp")


# --------------------------------------------------------------------------
# reductions and shape ops
# --------------------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out, dtype=np.float64), (a,), back, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _normalize_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    if n == 0:
        raise ShapeError("mean over an empty axis")
    return sum_(a, axes, keepdims) * (1.0 / n)


def broadcast_to(a, shape):
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from None
    return _result(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx):
    out = a.data[idx]

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out, dtype=np.float64), (a,), back, "getitem")


def masked_select(a, mask):
    """Select ``a[mask]`` for a boolean mask over the leading axes of ``a``."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[:mask.ndim]:
        raise ShapeError(f"mask shape {mask.shape} does not prefix tensor shape {a.shape}")
    out = a.data[mask]

    def back(g):
        full = np.zeros_like(a.data)
        full[mask] = g
        return (full,)

    return _result(out, (a,), back, "masked_select")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=ax)
                     for k in range(len(tensors)))

    return _result(out, tuple(tensors), back, "concat")


def detach(a):
    """Same values, cut from the graph."""
    out = Tensor.__new__(Tensor)
    out.data = a.data.copy()
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out.op = "detach"
    return out


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: cannot broadcast {a.shape} @ {b.shape}") from None

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _result(out, (a, b), back, "matmul")


def l2norm(a):
    """Euclidean norm over the last axis (that axis is dropped)."""
    return sqrt(sum_(a * a, axis=-1))


def cosine_similarity(a, b):
    """<a, b> / max(|a| |b|, eps) over the last axis, with broadcasting.

    The floor only engages for (near) zero vectors, so the value stays exactly
    scale invariant and equals 1 for parallel inputs.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"cosine_similarity: feature dims differ {a.shape} vs {b.shape}")
    return sum_(a * b, axis=-1) / clamp(l2norm(a) * l2norm(b), COS_EPS, np.inf)


def pairwise_cosine(a, b):
    """Cosine between every row of ``a`` (..., N, D) and every row of ``b`` (K, D).

    Returns (..., N, K).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"pairwise_cosine: feature dims differ {a.shape} vs {b.shape}")
    dots = matmul(a, transpose(b))
    na = reshape(l2norm(a), a.shape[:-1] + (1,))
    nb = l2norm(b)
    return dots / clamp(na * nb, COS_EPS, np.inf)


def softmax(a, axis=-1):
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), back, "softmax")


def log_softmax(a, axis=-1):
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ShapeError("log_softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), back, "log_softmax")


# --------------------------------------------------------------------------
# spatial ops, layout (batch, channel, height, width)
# --------------------------------------------------------------------------

def conv2d(x, w, b, stride=1):
    """3x3 convolution with zero padding 1, stride 1 or 2."""
    if stride not in (1, 2):
        raise ValueError("conv2d supports stride 1 or 2")
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (kernels.KSIZE, kernels.KSIZE):
        raise ShapeError(f"conv2d expects NCHW input and Cout x Cin x 3 x 3 weights, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d channel mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    out = kernels.conv2d_forward(x.data, w.data, b.data, stride)

    def back(g):
        return kernels.conv2d_backward(x.data, w.data, g, stride, x.requires_grad)

    return _result(out, (x, w, b), back, "conv2d")


def upsample_nearest(x, factor):
    """Nearest-neighbour upsampling of the last two axes by an integer factor."""
    factor = int(factor)
    if factor < 1:
        raise ValueError("upsample factor must be a positive integer")
    if factor == 1:
        return x
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)
    h, w = x.shape[-2], x.shape[-1]

    def back(g):
        g = g.reshape(g.shape[:-2] + (h, factor, w, factor))
        return (g.sum(axis=(-3, -1)),)

    return _result(out, (x,), back, "upsample")
