"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation records its parents and a backward closure on
the output tensor. Nodes receive a monotonically increasing id when created,
so creation order is a valid topological order: :func:`backward` replays the
recorded operations in reverse id order, which fixes the gradient
accumulation order and makes repeated backward passes bit-identical.

Arrays are numpy ``float32`` by default; :func:`precision` switches to
``float64`` for gradient checking.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "ContractError",
    "precision",
    "set_precision",
    "default_dtype",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "zeros",
    "ones",
    "backward",
    "zero_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "linear",
    "exp",
    "log",
    "relu",
    "sigmoid",
    "softplus",
    "clip",
    "softmax",
    "masked_softmax",
    "log_softmax",
    "layer_norm",
    "concat",
    "stack",
    "broadcast_to",
    "reshape",
    "transpose",
    "swapaxes",
    "tsum",
    "mean",
    "exclusive_cumsum",
    "conv2d",
    "elementwise",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ContractError(ValueError):
    """A documented precondition was violated."""


_dtype = np.float32
_grad_enabled = True
_ids = itertools.count()


def default_dtype():
    return _dtype


def set_precision(bits: int) -> None:
    global _dtype
    if bits == 32:
        _dtype = np.float32
    elif bits == 64:
        _dtype = np.float64
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits}")


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily change the dtype used for new tensors."""
    global _dtype
    saved = _dtype
    set_precision(bits)
    try:
        yield
    finally:
        _dtype = saved


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_id")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.array(data, dtype=dtype or _dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators -----------------------------------------------------
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

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

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

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def backward(self):
        backward(self)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_dtype), requires_grad=requires_grad, name=name)


def ones(shape, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=_dtype), requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._id = next(_ids)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# backward engine
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in nodes:
            continue
        nodes[node._id] = node
        stack.extend(p for p in node._parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if node._backward is None:
            g = np.array(g, dtype=node.data.dtype)
            node.grad = g if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for parent, pg in zip(node._parents, pgrads):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), bw)


def neg(x) -> Tensor:
    x = _as_tensor(x)
    return _make(-x.data, (x,), lambda g: (-g,))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        bad = float(x.data[x.data <= 0].reshape(-1)[0])
        raise DomainError(f"log of non-positive value {bad}")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    pos = x.data > 0
    return _make(np.maximum(x.data, 0), (x,), lambda g: (g * pos,))


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = _sigmoid_np(x.data)
    return _make(out, (x,), lambda g: (g * out * (1 - out),))


def softplus(x) -> Tensor:
    """log(1 + e^x), evaluated without overflow for large x."""
    x = _as_tensor(x)
    out = np.logaddexp(0, x.data).astype(x.dtype)
    return _make(out, (x,), lambda g: (g * _sigmoid_np(x.data),))


def clip(x, lo=None, hi=None) -> Tensor:
    x = _as_tensor(x)
    out = np.clip(x.data, lo, hi)
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x.data >= lo
    if hi is not None:
        inside &= x.data <= hi
    return _make(out, (x,), lambda g: (g * inside,))


_KINDS = {
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "neg": neg,
    "add": add,
    "mul": mul,
}


def elementwise(kind: str, *operands, axis: int = -1) -> Tensor:
    """Dispatch by name; ``concat`` joins operands along ``axis``."""
    if kind == "concat":
        return concat(operands, axis=axis)
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions not broadcastable: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), bw)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is (in, out)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    parents = (x, w)
    if b is not None:
        b = _as_tensor(b)
        out += b.data
        parents = (x, w, b)
    out = out.reshape(lead + (w.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    return _make(out, parents, bw)


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)
    if not isinstance(out, np.ndarray):
        out = np.array(out, dtype=x.dtype)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _make(out, (x,), bw)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axes, keepdims) * (1.0 / n)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x, a, b) -> Tensor:
    x = _as_tensor(x)
    return _make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def broadcast_to(x, shape) -> Tensor:
    x = _as_tensor(x)
    return _make(np.broadcast_to(x.data, shape), (x,), lambda g: (_unbroadcast(g, x.shape),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def _getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.asarray(out), (x,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        parts = np.split(g, bounds, axis=ax)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, ts))

    return _make(out, tuple(ts), bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)
    ax = axis % out.ndim

    def bw(g):
        return tuple(np.take(g, i, axis=ax) if t.requires_grad else None for i, t in enumerate(ts))

    return _make(out, tuple(ts), bw)


def exclusive_cumsum(x, axis: int = -1) -> Tensor:
    """out[i] = sum_{j<i} x[j] along ``axis`` (first entry is 0)."""
    x = _as_tensor(x)
    ax = axis % x.ndim
    # shift instead of subtracting x so entries never see x[i] roundoff
    out = np.zeros_like(x.data)
    head = [slice(None)] * x.ndim
    tail = [slice(None)] * x.ndim
    head[ax] = slice(1, None)
    tail[ax] = slice(None, -1)
    out[tuple(head)] = np.cumsum(x.data[tuple(tail)], axis=ax)

    def bw(g):
        gx = np.zeros_like(g)
        gx[tuple(tail)] = np.flip(np.cumsum(np.flip(g[tuple(head)], axis=ax), axis=ax), axis=ax)
        return (gx,)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# fused neural-network primitives
# ---------------------------------------------------------------------------


def masked_softmax(x, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction.

    Entries where ``mask`` is False get probability 0; a slice with no valid
    entry yields all zeros instead of NaN.
    """
    x = _as_tensor(x)
    if mask is None:
        z = x.data - np.max(x.data, axis=axis, keepdims=True)
        e = np.exp(z)
        out = e / np.sum(e, axis=axis, keepdims=True)
    else:
        mask = np.broadcast_to(mask, x.shape)
        z = np.where(mask, x.data, -np.inf)
        m = np.max(z, axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0)
        e = np.where(mask, np.exp(np.where(mask, x.data - m, 0)), 0).astype(x.dtype)
        s = np.sum(e, axis=axis, keepdims=True)
        out = e / np.where(s > 0, s, 1)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (x,), bw)


def softmax(x, axis: int = -1) -> Tensor:
    return masked_softmax(x, None, axis)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _make(out, (x,), lambda g: (g - sm * np.sum(g, axis=axis, keepdims=True),))


def layer_norm(x, gamma, beta, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise each slice along ``axis`` to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    ax = axis % x.ndim
    n = x.shape[ax]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must be ({n},)")
    bshape = [1] * x.ndim
    bshape[ax] = n
    gm = gamma.data.reshape(bshape)
    bt = beta.data.reshape(bshape)
    xc = x.data - x.data.mean(axis=ax, keepdims=True)
    var = np.einsum("...i,...i->...", xc, xc)[..., None] / n if ax == x.ndim - 1 else (xc * xc).mean(axis=ax, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc
    xhat *= inv
    out = xhat * gm
    out += bt
    other = tuple(i for i in range(x.ndim) if i != ax)

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gm
            proj = (gh * xhat).mean(axis=ax, keepdims=True)
            gx = gh - gh.mean(axis=ax, keepdims=True)
            gx -= xhat * proj
            gx *= inv
        gg = (g * xhat).sum(axis=other) if gamma.requires_grad else None
        gb = g.sum(axis=other) if beta.requires_grad else None
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw)


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution on channels-last input.

    x: (N, H, W, Cin); w: (k, k, Cin, Cout); b: (Cout,). Zero padding.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (N, H, W, C) input, got {x.shape}")
    k, k2, cin, cout = w.shape
    if k != k2 or x.shape[-1] != cin:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    n, h, wd, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    cols = np.empty((n, ho, wo, k, k, cin), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            cols[:, :, :, di, dj, :] = xp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :]
    cols2 = cols.reshape(n * ho * wo, k * k * cin)
    w2 = w.data.reshape(k * k * cin, cout)
    out = cols2 @ w2
    parents = (x, w)
    if b is not None:
        b = _as_tensor(b)
        out = out + b.data
        parents = (x, w, b)
    out = out.reshape(n, ho, wo, cout)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(n, ho, wo, k, k, cin)
            gxp = np.zeros_like(xp)
            for di in range(k):
                for dj in range(k):
                    gxp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :] += gcols[:, :, :, di, dj, :]
            gx = gxp[:, pad:pad + h, pad:pad + wd, :]
        gw = (cols2.T @ g2).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    return _make(out, parents, bw)
