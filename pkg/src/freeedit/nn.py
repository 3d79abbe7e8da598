"""Parameter containers and the shared pre-norm attention block."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .rng import SplitMix64
from .tensor import Tensor


class Module:
    """Holds named parameters and child modules in registration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        p = Tensor(value, requires_grad=True, name=name)
        self._params[name] = p
        return p

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return dict(self.named_parameters(prefix))


def xavier(rng: SplitMix64, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, shape or (fan_in, fan_out))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: SplitMix64, bias: bool = True):
        super().__init__()
        self.w = self.add_param("w", xavier(rng, n_in, n_out))
        self.b = self.add_param("b", np.zeros(n_out)) if bias else None

    def __call__(self, x) -> Tensor:
        return T.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.g = self.add_param("g", np.ones(dim))
        self.b = self.add_param("b", np.zeros(dim))

    def __call__(self, x) -> Tensor:
        return T.layer_norm(x, self.g, self.b)


class MLP(Module):
    """Linear -> ReLU -> Linear."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: SplitMix64):
        super().__init__()
        self.fc1 = self.add_child("fc1", Linear(n_in, n_hidden, rng))
        self.fc2 = self.add_child("fc2", Linear(n_hidden, n_out, rng))

    def __call__(self, x) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


def multi_head_attention(q_in: Tensor, kv_in: Tensor, wq: Linear, wk: Linear, wv: Linear,
                         wo: Linear, heads: int, key_mask: np.ndarray | None = None,
                         return_weights: bool = False):
    """Scaled dot-product attention over the second-to-last axis.

    q_in: (..., Lq, D); kv_in: (..., Lk, D), leading dims broadcastable.
    key_mask: boolean (..., Lk); False keys receive zero weight.
    """
    dim = q_in.shape[-1]
    if dim % heads:
        raise T.ShapeError(f"width {dim} not divisible by {heads} heads")
    dh = dim // heads
    lq, lk = q_in.shape[-2], kv_in.shape[-2]

    def split(x, length):
        lead = x.shape[:-2]
        return x.reshape(lead + (length, heads, dh)).swapaxes(-2, -3)

    q = split(wq(q_in), lq)
    k = split(wk(kv_in), lk)
    v = split(wv(kv_in), lk)
    scores = T.matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    mask = None
    if key_mask is not None:
        mask = np.asarray(key_mask, dtype=bool)[..., None, None, :]
    attn = T.masked_softmax(scores, mask, axis=-1)
    out = T.matmul(attn, v).swapaxes(-2, -3)
    out = out.reshape(out.shape[:-2] + (dim,))
    out = wo(out)
    if return_weights:
        return out, attn
    return out


class AttentionBlock(Module):
    """Pre-norm transformer block: y = x + Attn(LN(x), ctx); z = y + FFN(LN(y)).

    Without ``context`` this is self-attention; with it, queries come from
    ``x`` and keys/values from ``context`` (used as given, not normalised).
    """

    def __init__(self, dim: int, heads: int, ffn_dim: int, rng: SplitMix64):
        super().__init__()
        if dim % heads:
            raise T.ShapeError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.ln1 = self.add_child("ln1", LayerNorm(dim))
        self.q = self.add_child("q", Linear(dim, dim, rng))
        # a key bias only shifts every score of a query equally, so softmax ignores it
        self.k = self.add_child("k", Linear(dim, dim, rng, bias=False))
        self.v = self.add_child("v", Linear(dim, dim, rng))
        self.o = self.add_child("o", Linear(dim, dim, rng))
        self.ln2 = self.add_child("ln2", LayerNorm(dim))
        self.ffn = self.add_child("ffn", MLP(dim, ffn_dim, dim, rng))

    def __call__(self, x: Tensor, context: Tensor | None = None,
                 key_mask: np.ndarray | None = None) -> Tensor:
        h = self.ln1(x)
        ctx = h if context is None else context
        y = x + multi_head_attention(h, ctx, self.q, self.k, self.v, self.o, self.heads, key_mask)
        return y + self.ffn(self.ln2(y))
