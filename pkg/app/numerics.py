"""
Numerics
Dense real-matrix helpers and a small reverse-mode autodiff engine

The engine covers exactly the operators the training graph needs: matmul,
add, scale, row-normalize, softmax, log, elementwise product, layer-norm,
GELU, gather and masked sum, plus the shape plumbing (reshape, transpose,
concat) attention requires.
"""
import math
import threading
from contextlib import contextmanager

import numpy as np

from app.exceptions import (
    KTooLarge,
    LengthMismatch,
    NonFiniteGradient,
    NonPositiveTemperature,
    ShapeMismatch,
    ZeroRow,
)

NORM_EPS = 1e-12
LOG_EPS = 1e-12
GRAD_CHECK_STEP = 1e-5

_state = threading.local()


def get_dtype():
    """Working dtype for new tensors (float32 unless inside `precision`)"""
    return getattr(_state, 'dtype', np.float32)


def grad_enabled():
    return getattr(_state, 'grad', True)


@contextmanager
def precision(dtype):
    """
    Temporarily switch the working dtype

    Usage:
        with precision(np.float64):
            err = grad_check(f, x)
    """
    previous = get_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = previous


@contextmanager
def no_grad():
    """Evaluate without recording a graph (teacher branch, finite differences)"""
    previous = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = previous


def as_array(x):
    """Convert anything array-like to the working dtype"""
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=get_dtype())


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to `shape`"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """
    A node in the differentiation graph

    `data` holds the value; `grad` is filled by `backward()` with an array of
    the same shape. Nodes built while `no_grad()` is active, or from inputs
    that do not require gradients, are constants and record no parents.
    """

    def __init__(self, data, requires_grad=False, op=''):
        if isinstance(data, np.ndarray) and data.dtype.kind == 'f':
            self.data = data
        else:
            self.data = np.asarray(data, dtype=get_dtype())
        self.requires_grad = requires_grad
        self.grad = None
        self.op = op
        self._parents = ()
        self._backward = None

    # ------------------------------------------------------------------
    # graph plumbing
    # ------------------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        """Constant copy of this node's value (stop-gradient)"""
        return Tensor(self.data, requires_grad=False, op='detach')

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, grad):
        grad = _unbroadcast(np.asarray(grad), self.data.shape).astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self, grad=None):
        """
        Reverse-mode pass from this node

        Every reachable node is visited exactly once, in reverse topological
        order.
        """
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.data.dtype)
        self._accumulate(seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ------------------------------------------------------------------
    # operator sugar
    # ------------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise ShapeMismatch("Tensor division is only defined for scalar divisors")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return masked_sum(self, None, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op='{self.op}')"


def as_tensor(x):
    """Wrap a constant; tensors pass through untouched"""
    return x if isinstance(x, Tensor) else Tensor(as_array(x))


def _result(data, parents, op, backward):
    """Create an op output and, when a graph is live, wire its backward"""
    requires = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, op=op)
    if requires:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _send(parent, grad):
    if parent.requires_grad:
        parent._accumulate(grad)


# ----------------------------------------------------------------------------
# differentiable operators
# ----------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _send(a, g)
        _send(b, g)

    return _result(a.data + b.data, (a, b), 'add', backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _send(a, g)
        _send(b, -g)

    return _result(a.data - b.data, (a, b), 'sub', backward)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        _send(a, g * c)

    return _result(a.data * a.data.dtype.type(c), (a,), 'scale', backward)


def mul(a, b):
    """Elementwise product with numpy broadcasting"""
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _send(a, g * b.data)
        _send(b, g * a.data)

    return _result(a.data * b.data, (a, b), 'mul', backward)


def _matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _result(a.data @ b.data, (a, b), 'matmul', backward)


def l2_normalize(x, axis=-1):
    x = as_tensor(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    if np.any(norm < NORM_EPS):
        raise ZeroRow(f"row norm below {NORM_EPS}")
    y = x.data / norm

    def backward(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        _send(x, (g - y * dot) / norm)

    return _result(y, (x,), 'l2_normalize', backward)


def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        _send(x, y * (g - dot))

    return _result(y, (x,), 'softmax', backward)


def log(x, eps=LOG_EPS):
    """Natural log of max(x, eps); the clamp passes no gradient"""
    x = as_tensor(x)
    clamped = np.maximum(x.data, x.data.dtype.type(eps))

    def backward(g):
        _send(x, np.where(x.data > eps, g / clamped, 0.0))

    return _result(np.log(clamped), (x,), 'log', backward)


def layer_norm(x, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance (no affine)"""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    n = x.shape[-1]

    def backward(g):
        gsum = g.sum(axis=-1, keepdims=True)
        gxsum = (g * xhat).sum(axis=-1, keepdims=True)
        _send(x, inv_std * (g - gsum / n - xhat * gxsum / n))

    return _result(xhat, (x,), 'layer_norm', backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh approximation of GELU"""
    x = as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    y = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        dy = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        _send(x, g * dy)

    return _result(y, (x,), 'gelu', backward)


def gather(x, indices, axis=0):
    """Select entries along `axis` (np.take); repeated indices accumulate"""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    out = np.take(x.data, indices, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        where = [slice(None)] * x.ndim
        where[axis] = indices
        np.add.at(gx, tuple(where), g)
        _send(x, gx)

    return _result(out, (x,), 'gather', backward)


def masked_sum(x, mask=None, axis=None, keepdims=False):
    """Sum of x * mask over `axis`; mask must broadcast to x"""
    x = as_tensor(x)
    weights = None if mask is None else np.broadcast_to(np.asarray(mask, dtype=x.data.dtype), x.shape)
    weighted = x.data if weights is None else x.data * weights
    out = np.sum(weighted, axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        g = np.broadcast_to(g, x.shape)
        _send(x, g if weights is None else g * weights)

    return _result(out, (x,), 'masked_sum', backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(masked_sum(x, None, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape):
    x = as_tensor(x)

    def backward(g):
        _send(x, g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), 'reshape', backward)


def transpose(x, axes=None):
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = np.argsort(axes)

    def backward(g):
        _send(x, np.transpose(g, inverse))

    return _result(np.transpose(x.data, axes), (x,), 'transpose', backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            _send(t, piece)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, 'concat', backward)


# ----------------------------------------------------------------------------
# matrix helpers (accept ndarrays or tensors, return the same kind)
# ----------------------------------------------------------------------------

def _like(reference, out):
    return out if isinstance(reference, Tensor) else out.data


def matmul(A, B):
    """Matrix product; cosine similarity when both operands are row-normalized"""
    out = _matmul(A, B)
    return out if isinstance(A, Tensor) or isinstance(B, Tensor) else out.data


def rowwise_l2_normalize(M):
    """Scale every row to unit L2 norm (ZeroRow if a norm is below 1e-12)"""
    return _like(M, l2_normalize(as_tensor(M), axis=-1))


def softmax_temp(v, tau):
    """Temperature softmax over the last axis with max subtraction"""
    if not tau > 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {tau}")
    return _like(v, softmax(scale(as_tensor(v), 1.0 / tau), axis=-1))


def cross_entropy(p, q, eps=LOG_EPS):
    """
    -sum_i p_i log q_i over the last axis, with q clamped below at eps

    Returns a scalar for vectors and one value per row for matrices.
    """
    pt, qt = as_tensor(p), as_tensor(q)
    if pt.shape != qt.shape:
        raise LengthMismatch(f"p has shape {pt.shape}, q has shape {qt.shape}")
    out = scale(masked_sum(mul(pt, log(qt, eps)), None, axis=-1), -1.0)
    if isinstance(p, Tensor) or isinstance(q, Tensor):
        return out
    return float(out.data) if out.data.ndim == 0 else out.data


def topk_rowwise(S, k):
    """
    Per-row k largest entries in descending order

    Ties break toward the lower column index, so results are deterministic.

    Returns:
        tuple: (values, indices) both shaped rows x k
    """
    S = np.atleast_2d(np.asarray(S))
    if k > S.shape[1]:
        raise KTooLarge(f"k={k} exceeds row length {S.shape[1]}")
    indices = np.argsort(-S, axis=1, kind='stable')[:, :k]
    values = np.take_along_axis(S, indices, axis=1)
    return values, indices.astype(np.int64)


def grad_check(f, x, step=GRAD_CHECK_STEP):
    """
    Compare the autodiff gradient of a scalar function with central differences

    Runs entirely in float64.

    Args:
        f: callable taking a Tensor and returning a scalar Tensor
        x: point to check at

    Returns:
        float: max over entries of |analytic - numeric| / (|analytic| + 1e-8)
    """
    with precision(np.float64):
        x64 = np.array(as_array(x), dtype=np.float64)
        point = Tensor(x64.copy(), requires_grad=True)
        f(point).backward()
        analytic = np.zeros_like(x64) if point.grad is None else point.grad
        if not np.all(np.isfinite(analytic)):
            raise NonFiniteGradient("analytic gradient contains NaN/Inf")

        numeric = np.zeros_like(x64)
        with no_grad():
            for idx in np.ndindex(x64.shape):
                plus = x64.copy()
                minus = x64.copy()
                plus[idx] += step
                minus[idx] -= step
                f_plus = float(f(Tensor(plus)).data)
                f_minus = float(f(Tensor(minus)).data)
                numeric[idx] = (f_plus - f_minus) / (2 * step)
        if not np.all(np.isfinite(numeric)):
            raise NonFiniteGradient("finite-difference gradient contains NaN/Inf")

    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))
