"""Reverse-mode automatic differentiation over numpy arrays.

A ``Value`` records its parents and a backward closure only when at least
one input requires a gradient, so frozen sub-networks run as plain numpy.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

_state = {"dtype": np.float32, "pool_trace": None}


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created constants."""
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def trace_pooling():
    """Collect the argmax pattern of every max-pool evaluated inside the block."""
    prev = _state["pool_trace"]
    trace = []
    _state["pool_trace"] = trace
    try:
        yield trace
    finally:
        _state["pool_trace"] = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Value:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Value(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _make(data, parents, backward) -> "Value":
        out = Value(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def backward(self, grad=None) -> None:
        backward(self, grad)

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = as_value(other, self.data.dtype)
        a, b = self.shape, other.shape
        return Value._make(self.data + other.data, (self, other),
                           lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __neg__(self):
        return Value._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_value(other, self.data.dtype))

    def __rsub__(self, other):
        return as_value(other, self.data.dtype) + (-self)

    def __mul__(self, other):
        other = as_value(other, self.data.dtype)
        x, y = self.data, other.data

        def bw(g):
            return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)
        return Value._make(x * y, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Value):
            return self * other ** -1
        return self * (1.0 / other)

    def __pow__(self, exponent):
        if isinstance(exponent, Value):
            raise TypeError("only constant exponents are supported")
        x = self.data
        return Value._make(x ** exponent, (self,),
                           lambda g: (g * exponent * x ** (exponent - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ---------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.shape
        return Value._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(orig),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Value._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)
        return Value._make(out, (self,), bw)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = math.prod(self.shape[a] for a in axes)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def abs(self):
        x = self.data
        # subgradient 0 at x == 0
        return Value._make(np.abs(x), (self,), lambda g: (g * np.sign(x),))


def as_value(x, dtype=None) -> Value:
    if isinstance(x, Value):
        return x
    arr = np.asarray(x, dtype=dtype or default_dtype())
    return Value(arr)


def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    x, y = a.data, b.data
    if x.ndim < 2 or y.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape)
        if b.requires_grad:
            if y.ndim == 2 and x.ndim > 2:
                # fold batch dims into one GEMM
                gb = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape)
        return ga, gb
    return Value._make(x @ y, (a, b), bw)


def concat(values, axis: int = -1) -> Value:
    values = [as_value(v) for v in values]
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([v.data for v in values], axis=axis)
    return Value._make(out, tuple(values), lambda g: tuple(np.split(g, splits, axis=axis)))


def softmax(x: Value, axis: int = -1) -> Value:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return Value._make(y, (x,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Value) -> Value:
    """tanh approximation of GELU."""
    v = x.data
    v2 = v * v
    t = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t ** 2) * dinner),)
    return Value._make(out, (x,), bw)


def layer_norm(x: Value, gamma: Value, beta: Value, eps: float = 1e-5) -> Value:
    """Normalize over the last axis, then scale and shift."""
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, v.shape[-1]).sum(0)
        if beta.requires_grad:
            gb = g.reshape(-1, v.shape[-1]).sum(0)
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(-1, keepdims=True)
                        - xhat * (gh * xhat).mean(-1, keepdims=True))
        return gx, gg, gb
    return Value._make(out, (x, gamma, beta), bw)


def max_pool_grid(x: Value, height: int, width: int, k: int = 2) -> Value:
    """Max-pool tokens (B, H*W, D) laid out row-major on an HxW grid by k x k windows."""
    b, n, d = x.shape
    if n != height * width or height % k or width % k:
        raise ValueError(f"cannot pool {n} tokens on a {height}x{width} grid by {k}")
    h2, w2 = height // k, width // k
    win = (x.data.reshape(b, h2, k, w2, k, d).transpose(0, 1, 3, 2, 4, 5)
           .reshape(b, h2, w2, k * k, d))
    arg = win.argmax(axis=3)  # first maximum wins ties
    if _state["pool_trace"] is not None:
        _state["pool_trace"].append(arg)
    out = np.take_along_axis(win, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def bw(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, arg[:, :, :, None, :], g.reshape(b, h2, w2, 1, d), axis=3)
        gx = (gwin.reshape(b, h2, w2, k, k, d).transpose(0, 1, 3, 2, 4, 5)
              .reshape(b, n, d))
        return (gx,)
    return Value._make(out.reshape(b, h2 * w2, d), (x,), bw)


def topological_order(root: Value) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(root: Value, grad=None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    Leaf gradients accumulate across calls; intermediate gradients do not persist.
    """
    if grad is None:
        if root.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {root.shape}")
        grad = np.ones_like(root.data)
    if not root.requires_grad:
        return
    grads = {id(root): np.asarray(grad, dtype=root.data.dtype)}
    for node in reversed(topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
