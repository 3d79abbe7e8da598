"""Image feature extractor and 7x7 token pooling."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .geometry import bilinear_matrix
from .nn import Module
from .rng import SplitMix64
from .tensor import ContractError, Tensor

GRID = 7
STRIDE = 8


class Encoder(Module):
    """Three stride-2 3x3 convolutions with ReLU: 3 -> 32 -> 64 -> C channels."""

    def __init__(self, channels: int, rng: SplitMix64, widths=(32, 64)):
        super().__init__()
        dims = [3, *widths, channels]
        self.convs = []
        for i in range(3):
            cin, cout = dims[i], dims[i + 1]
            a = math.sqrt(6.0 / (9 * cin))  # He-uniform for ReLU
            w = self.add_param(f"conv{i}.w", rng.uniform(-a, a, (3, 3, cin, cout)))
            b = self.add_param(f"conv{i}.b", np.zeros(cout))
            self.convs.append((w, b))

    def __call__(self, images) -> Tensor:
        """(N, H, W, 3) or (H, W, 3) images in [0, 1] -> (N, ceil(H/8), ceil(W/8), C)."""
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        if x.shape[1] < 16 or x.shape[2] < 16:
            raise ContractError(f"images must be at least 16x16, got {x.shape[1]}x{x.shape[2]}")
        if x.data.min() < 0 or x.data.max() > 1:
            raise ContractError("image values must lie in [0, 1]")
        for w, b in self.convs:
            x = T.relu(T.conv2d(x, w, b, stride=2, pad=1))
        return x


def encode_image(encoder: Encoder, img) -> Tensor:
    """Single (H, W, 3) image -> (H/8, W/8, C) feature map."""
    fmap = encoder(img)
    return fmap.reshape(fmap.shape[1:])


def _bins(n: int, cells: int) -> list[tuple[int, int]]:
    # floor start / ceil end: equals floor/floor when cells divides n and never yields an empty bin
    return [((i * n) // cells, -((-(i + 1) * n) // cells)) for i in range(cells)]


def pooling_matrix(height: int, width: int, cells: int = GRID) -> np.ndarray:
    """(cells*cells, height*width) adaptive-average-pooling weights."""
    rows = np.zeros((cells, height))
    cols = np.zeros((cells, width))
    for i, (a, b) in enumerate(_bins(height, cells)):
        rows[i, a:b] = 1.0 / (b - a)
    for j, (a, b) in enumerate(_bins(width, cells)):
        cols[j, a:b] = 1.0 / (b - a)
    return np.kron(rows, cols)


def pool_tokens(fmap: Tensor) -> Tensor:
    """(..., H', W', C) feature map -> (..., 49, C) row-major token grid."""
    h, w, c = fmap.shape[-3:]
    lead = fmap.shape[:-3]
    flat = fmap.reshape(lead + (h * w, c))
    return T.matmul(Tensor(pooling_matrix(h, w)), flat)


def token_centers(cells: int = GRID) -> np.ndarray:
    """Normalised (u, v) centre of each token; token k is cell (k mod 7, k div 7)."""
    k = np.arange(cells * cells)
    return np.stack([(k % cells + 0.5) / cells, (k // cells + 0.5) / cells], axis=-1)


def token_sample_matrix(u, v, cells: int = GRID) -> np.ndarray:
    """Interpolation weights (n, 49) for normalised image coordinates in [0, 1]."""
    return bilinear_matrix(cells, cells, np.asarray(u) * cells - 0.5, np.asarray(v) * cells - 0.5)


def token_grid_sample(tokens: Tensor, u, v) -> Tensor:
    """Sample a (49, C) token grid at normalised coordinates (u, v); returns (..., C)."""
    u = np.asarray(u, dtype=np.float64)
    mat = token_sample_matrix(u, v)
    out = T.matmul(Tensor(mat), tokens)
    return out.reshape(u.shape + (tokens.shape[-1],))
