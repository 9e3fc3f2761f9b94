"""Dense float64 arrays with reverse-mode differentiation.

Every op builds a node holding its parents and a backward function mapping
the output gradient to one gradient per parent. ``Tensor.backward`` replays
the nodes in reverse topological order. Spatial ops use channels-last layout,
``(H, W, C)`` or batched ``(N, H, W, C)``.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = op

    # -- construction helpers -------------------------------------------
    @classmethod
    def zeros(cls, shape, requires_grad=False):
        return cls(np.zeros(shape), requires_grad)

    @classmethod
    def ones(cls, shape, requires_grad=False):
        return cls(np.ones(shape), requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # -- autodiff ---------------------------------------------------------
    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = topological_order(self)
        for node in order:
            if node._parents:
                node.grad = None
        self.grad = np.asarray(grad, dtype=np.float64).reshape(self.shape).copy()
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64, copy=True).reshape(parent.shape)
                else:
                    parent.grad = parent.grad + g
            if node._parents:
                # intermediate gradients are not needed once propagated
                node.grad = None

    # -- operators --------------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, parents before children."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    out = Tensor(data, op=op)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise -------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b), "div",
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data ** exponent, (a,), "pow",
                 lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def smooth_l1(a, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style penalty: 0.5 x^2 / beta inside |x| < beta, |x| - beta/2 outside."""
    a = as_tensor(a)
    x = a.data
    ax = np.abs(x)
    inside = ax < beta
    out = np.where(inside, 0.5 * x * x / beta, ax - 0.5 * beta)
    return _make(out, (a,), "smooth_l1",
                 lambda g: (g * np.where(inside, x / beta, np.sign(x)),))


def bce_with_logits(logits, target) -> Tensor:
    """Elementwise binary cross-entropy on logits, computed without overflow."""
    logits = as_tensor(logits)
    y = as_tensor(target).data
    z = logits.data
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return _make(out, (logits,), "bce_with_logits", lambda g: (g * (_sigmoid(z) - y),))


# -- reductions and shape ------------------------------------------------------
def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), "sum", backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        if _needs_add_at(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(a.data[index], (a,), "getitem", backward)


def _needs_add_at(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat",
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, "stack",
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def concat_c(a, b) -> Tensor:
    """Channel concatenation; spatial dims must agree."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise ValueError(f"concat_c: spatial mismatch {a.shape} vs {b.shape}")
    return concat([a, b], axis=-1)


def softmax(a, axis: int = 0) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), "softmax", backward)


# -- spatial ops -----------------------------------------------------------------
def _as4d(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (H, W, C) or (N, H, W, C), got shape {x.shape}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[0], xp.shape[3]
    cols = np.empty((n, ho, wo, kh, kw, c))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def _conv2d_backward(g, xp, w, stride, padding, ho, wo):
    """Gradients of conv2d w.r.t. (padded input, kernel, bias)."""
    kh, kw, cin, cout = w.shape
    n = xp.shape[0]
    g2 = g.reshape(-1, cout)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    gw = (cols.T @ g2).reshape(w.shape)
    gb = g2.sum(axis=0)
    gcols = (g2 @ w.reshape(-1, cout).T).reshape(n, ho, wo, kh, kw, cin)
    gxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
    return gxp, gw, gb


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int | None = None) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``kernel`` has shape ``(Kh, Kw, Cin, Cout)``; ``padding`` defaults to
    ``(K - 1) // 2`` (same-size output at stride 1).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 4:
        raise ValueError(f"conv2d: kernel must be (Kh, Kw, Cin, Cout), got {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    x4, squeeze = _as4d(x.data)
    if x4.shape[3] != cin:
        raise ValueError(f"conv2d: input has {x4.shape[3]} channels, kernel expects {cin}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f"conv2d: bias must have shape ({cout},), got {bias.shape}")
    if padding is None:
        padding = (kh - 1) // 2
    n, h, w_, _ = x4.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w_ + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: input {h}x{w_} too small for kernel {kh}x{kw}")
    xp = np.pad(x4, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x4
    out = _im2col(xp, kh, kw, stride, ho, wo) @ kernel.data.reshape(-1, cout)
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout)
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        gxp, gw, gb = _conv2d_backward(g4, xp, kernel.data, stride, padding, ho, wo)
        gx = gxp[:, padding:padding + h, padding:padding + w_, :] if padding else gxp
        if squeeze:
            gx = gx[0]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return _make(out, parents, "conv2d", backward)


def avg_pool2(x) -> Tensor:
    """Mean over non-overlapping 2x2 blocks."""
    x = as_tensor(x)
    x4, squeeze = _as4d(x.data)
    n, h, w, c = x4.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2: spatial dims must be even, got {h}x{w}")
    out = x4.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        gx = np.repeat(np.repeat(g4, 2, axis=1), 2, axis=2) * 0.25
        return (gx[0] if squeeze else gx,)

    return _make(out, (x,), "avg_pool2", backward)


def upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    x = as_tensor(x)
    x4, squeeze = _as4d(x.data)
    n, h, w, c = x4.shape
    out = np.repeat(np.repeat(x4, 2, axis=1), 2, axis=2)
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        gx = g4.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4))
        return (gx[0] if squeeze else gx,)

    return _make(out, (x,), "upsample2", backward)
