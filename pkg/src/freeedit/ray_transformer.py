"""Ray transformer, colour head and the density head used for hitting weights."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import MLP, AttentionBlock, LayerNorm, Module
from .rng import SplitMix64
from .tensor import Tensor

MIN_VALID_POINTS = 3


def volume_weights(sigma, delta) -> Tensor:
    """w_i = exp(-sum_{j<i} sigma_j delta_j) * (1 - exp(-sigma_i delta_i)) along the last axis."""
    tau = T.mul(sigma, delta)
    trans = T.exp(-T.exclusive_cumsum(tau, axis=-1))
    return trans * (1.0 - T.exp(-tau))


def transmittance(sigma, delta) -> np.ndarray:
    tau = np.asarray(sigma) * np.asarray(delta)
    before = np.zeros_like(tau)
    before[..., 1:] = np.cumsum(tau[..., :-1], axis=-1)
    return np.exp(-before)


class RayTransformer(Module):
    def __init__(self, dim: int, rng: SplitMix64, heads: int = 4, ffn_dim: int = 128,
                 n_blocks: int = 2, rgb_hidden: int = 64, density_hidden: int = 32):
        super().__init__()
        self.blocks = [self.add_child(f"block{i}", AttentionBlock(dim, heads, ffn_dim, rng))
                       for i in range(n_blocks)]
        # closes the pre-norm stack; without it the residual stream reaches the heads unnormalised
        self.norm = self.add_child("norm", LayerNorm(dim))
        self.rgb = self.add_child("rgb", MLP(dim, rgb_hidden, 3, rng))
        self.density = self.add_child("density", MLP(dim, density_hidden, 1, rng))

    def ray_attention(self, feats: Tensor, point_valid: np.ndarray) -> Tensor:
        """Self-attention among each ray's (R, P, D) point features; invalid points are masked keys."""
        x = feats
        for blk in self.blocks:
            x = blk(x, key_mask=point_valid)
        return self.norm(x)

    def predict_rgb(self, feats: Tensor, point_valid: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Masked mean over valid points -> MLP -> sigmoid. Returns (R, 3) colours and ray validity."""
        keep = point_valid.astype(T.default_dtype())
        count = keep.sum(axis=-1, keepdims=True)
        pooled = (feats * Tensor(keep[..., None])).sum(axis=1) * Tensor(1.0 / np.maximum(count, 1.0))
        return T.sigmoid(self.rgb(pooled)), count[:, 0] > 0

    def hitting_weights(self, feats: Tensor, deltas: np.ndarray, point_valid: np.ndarray):
        """Per-point hitting probabilities (R, P); sigma is forced to 0 at invalid points."""
        sigma = T.softplus(self.density(feats)).reshape(feats.shape[:2])
        sigma = sigma * Tensor(point_valid.astype(T.default_dtype()))
        return volume_weights(sigma, Tensor(deltas)), sigma
