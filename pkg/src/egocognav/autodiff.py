"""Minimal dense-tensor compute graph with reverse-mode differentiation.

Tensors wrap numpy arrays. Every op that touches a tensor requiring
gradients records its parents and a closure mapping the output gradient to
parent gradients. Node ids increase monotonically, so sorting reachable
nodes by descending id is a valid reverse topological order.

Leading axes are treated as batch axes by every op; matmul follows numpy
broadcasting so a ``(B, T, k) @ (k, m)`` weight product works directly.
"""
import builtins
import itertools
import math

import numpy as np
from scipy.special import expit

from .errors import NonFinite, NotScalar, ShapeMismatch

_ids = itertools.count()

DEFAULT_DTYPE = np.float64

__all__ = [
    "Tensor", "Parameter", "Tape", "as_tensor", "backward", "finite_difference_check",
    "add", "sub", "mul", "div", "neg", "scale", "matmul", "sum", "mean", "reshape",
    "transpose", "swap_last", "concat", "stack", "getitem", "exp", "log", "sqrt",
    "abs", "square", "relu", "gelu", "sigmoid", "tanh", "softmax", "layer_norm",
    "mean_pool_over_time", "bce_with_logits", "scaled_dot_attention",
]


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "requires_grad", "id", "op", "__weakref__")

    def __init__(self, data, parents=(), backward_fn=None, op="", requires_grad=None):
        self.data = data
        self.parents = parents
        self.backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r})"

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

    def __neg__(self):
        return neg(self)

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
        return transpose(self, axes)


class Parameter(Tensor):
    """A leaf tensor with a gradient accumulator.

    ``decay`` marks whether decoupled weight decay applies (weights yes,
    biases and norm gains no).
    """

    __slots__ = ("name", "grad", "decay")

    def __init__(self, data, name="", decay=True):
        data = np.array(data)
        if data.dtype.kind != "f":
            data = data.astype(DEFAULT_DTYPE)
        super().__init__(data, requires_grad=True, op="param")
        self.name = name
        self.decay = decay
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, np.ndarray) and x.dtype.kind == "f":
        dtype = x.dtype
    arr = np.asarray(x, dtype=dtype or DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=False, op="const")


def _check(data, op):
    if not np.isfinite(data).all():
        raise NonFinite(f"non-finite values produced by {op}")
    return data


def _make(data, parents, backward_fn, op):
    _check(data, op)
    if not any(p.requires_grad for p in parents):
        return Tensor(data, op=op, requires_grad=False)
    return Tensor(data, parents, backward_fn, op, requires_grad=True)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeMismatch(f"{op}: incompatible shapes {a} and {b}") from None


# ---------------------------------------------------------------- elementwise

def add(x, y):
    x, y = as_tensor(x), as_tensor(y)
    _broadcast_shape(x.shape, y.shape, "add")
    xs, ys = x.shape, y.shape
    return _make(x.data + y.data, (x, y),
                 lambda g: (_unbroadcast(g, xs), _unbroadcast(g, ys)), "add")


def sub(x, y):
    x, y = as_tensor(x), as_tensor(y)
    _broadcast_shape(x.shape, y.shape, "sub")
    xs, ys = x.shape, y.shape
    return _make(x.data - y.data, (x, y),
                 lambda g: (_unbroadcast(g, xs), _unbroadcast(-g, ys)), "sub")


def mul(x, y):
    if not isinstance(y, Tensor) and np.isscalar(y):
        return scale(x, y)
    if not isinstance(x, Tensor) and np.isscalar(x):
        return scale(y, x)
    x, y = as_tensor(x), as_tensor(y)
    _broadcast_shape(x.shape, y.shape, "mul")
    xd, yd = x.data, y.data
    return _make(xd * yd, (x, y),
                 lambda g: (_unbroadcast(g * yd, xd.shape), _unbroadcast(g * xd, yd.shape)), "mul")


def div(x, y):
    if not isinstance(y, Tensor) and np.isscalar(y):
        return scale(x, 1.0 / y)
    x, y = as_tensor(x), as_tensor(y)
    _broadcast_shape(x.shape, y.shape, "div")
    xd, yd = x.data, y.data
    out = xd / yd
    return _make(out, (x, y),
                 lambda g: (_unbroadcast(g / yd, xd.shape), _unbroadcast(-g * out / yd, yd.shape)), "div")


def scale(x, c):
    x = as_tensor(x)
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def neg(x):
    return scale(x, -1.0)


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    x = as_tensor(x)
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _make(out, (x,), lambda g: (g / xd,), "log")


def sqrt(x):
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def abs(x):
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def square(x):
    x = as_tensor(x)
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Tanh-approximated GELU; smooth, so finite differences stay valid."""
    x = as_tensor(x)
    xd = x.data
    x2 = xd * xd
    inner = _GELU_C * xd * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out, (x,), bw, "gelu")


def sigmoid(x):
    x = as_tensor(x)
    out = expit(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def bce_with_logits(logits, targets):
    """Elementwise binary cross-entropy on logits, numerically stable."""
    x = as_tensor(logits)
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=x.data.dtype)
    if y.shape != x.shape:
        raise ShapeMismatch(f"bce_with_logits: {x.shape} vs {y.shape}")
    xd = x.data
    out = np.maximum(xd, 0.0) - xd * y + np.log1p(np.exp(-np.abs(xd)))
    return _make(out, (x,), lambda g: (g * (expit(xd) - y),), "bce")


# ---------------------------------------------------------------- reductions

def sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([shape[a] for a in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape),)

    return _make(np.mean(x.data, axis=axis, keepdims=keepdims), (x,), bw, "mean")


def mean_pool_over_time(x):
    """Average over the time axis (second to last) of a ``(..., T, d)`` tensor."""
    return mean(x, axis=-2)


# ---------------------------------------------------------------- structure

def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {old} as {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes):
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(x):
    x = as_tensor(x)
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "swap_last")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"stack: {exc}") from None
    n = len(tensors)
    return _make(out, tuple(tensors),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


def getitem(x, idx):
    """Basic (non-fancy) indexing; slices never alias, so assignment is safe."""
    x = as_tensor(x)
    shape, dtype = x.shape, x.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _make(x.data[idx], (x,), bw, "getitem")


# ---------------------------------------------------------------- linear algebra

def matmul(x, y):
    x, y = as_tensor(x), as_tensor(y)
    if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
        raise ShapeMismatch(f"matmul: {x.shape} @ {y.shape}")
    xd, yd = x.data, y.data
    try:
        out = np.matmul(xd, yd)
    except ValueError:
        raise ShapeMismatch(f"matmul: {x.shape} @ {y.shape}") from None

    def bw(g):
        gx = np.matmul(g, np.swapaxes(yd, -1, -2))
        gy = np.matmul(np.swapaxes(xd, -1, -2), g)
        return _unbroadcast(gx, xd.shape), _unbroadcast(gy, yd.shape)

    return _make(out, (x, y), bw, "matmul")


def softmax(x):
    """Softmax over the last axis."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def layer_norm(x, weight=None, bias=None, eps=1e-5):
    """Normalize the last axis; optional affine gain and shift."""
    x = as_tensor(x)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    out = _make(xhat, (x,), bw, "layer_norm")
    if weight is not None:
        out = mul(out, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def scaled_dot_attention(q, k, v, mask=None, return_weights=False):
    """softmax(q kᵀ / sqrt(d_k)) v over the last two axes.

    ``mask`` is a boolean array broadcastable to ``(..., Tq, Tk)``; False
    entries are excluded from attention.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeMismatch(f"attention: q{q.shape} k{k.shape} v{v.shape}")
    scores = scale(matmul(q, swap_last(k)), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        bias = np.where(np.asarray(mask, dtype=bool), 0.0, -1e9)
        scores = add(scores, as_tensor(bias, dtype=scores.data.dtype))
    weights = softmax(scores)
    out = matmul(weights, v)
    return (out, weights) if return_weights else out


# ---------------------------------------------------------------- backward

class Tape:
    """Reachable part of the graph below a root, in reverse topological order."""

    def __init__(self, root):
        seen = set()
        nodes = []
        stack_ = [root]
        while stack_:
            node = stack_.pop()
            if node.id in seen or not node.requires_grad:
                continue
            seen.add(node.id)
            nodes.append(node)
            stack_.extend(node.parents)
        nodes.sort(key=lambda n: n.id, reverse=True)
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)

    def parameters(self):
        return [n for n in self.nodes if isinstance(n, Parameter)]


def backward(loss, params=None):
    """Accumulate d(loss)/d(param) into every reachable ``Parameter.grad``.

    With ``params`` given, their accumulators are reset first and the list
    of gradients is returned (zeros for parameters the loss never reached).
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params:
            p.zero_grad()
    if not loss.requires_grad:
        return [p.grad for p in params] if params is not None else None
    tape = Tape(loss)
    grads = {loss.id: np.ones_like(loss.data)}
    for node in tape.nodes:
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = node.grad + g
            continue
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.id)
            grads[parent.id] = pg if prev is None else prev + pg
    if params is not None:
        return [p.grad for p in params]
    return None


def finite_difference_check(f, p, eps=1e-5, n_samples=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a zero-argument callable returning a scalar Tensor that
    depends on parameter ``p``. Coordinates are all of ``p`` unless
    ``n_samples`` is given, in which case that many are drawn from ``rng``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    p.zero_grad()
    backward(f())
    analytic = p.grad.copy().ravel()
    flat = p.data.reshape(-1)
    n = flat.size
    if n_samples is None or n_samples >= n:
        coords = np.arange(n)
    else:
        rng = np.random.default_rng(rng)
        coords = rng.choice(n, size=n_samples, replace=False)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f().data)
        flat[i] = orig - eps
        fm = float(f().data)
        flat[i] = orig
        central = (fp - fm) / (2 * eps)
        err = builtins.abs(analytic[i] - central) / (builtins.abs(central) + 1e-8)
        worst = max(worst, err)
    return worst
