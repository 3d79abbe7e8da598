"""Epipolar aggregation: per-view attention along epipolar samples (E1 with a
learned weighted sum), then attention across views (E3 with a second
learned weighted sum), producing one feature per 3-D sample point."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import token_sample_matrix
from .geometry import CameraPose, epipolar_samples, fourier_encode, sample_image
from .nn import AttentionBlock, Linear, Module
from .rng import SplitMix64
from .tensor import Tensor


@dataclass
class EpipolarFeatureBlock:
    features: Tensor        # (R, P, M, Ne, D), zero where masked
    mask: np.ndarray        # (R, P, M, Ne)
    view_valid: np.ndarray  # (R, P, M): centre projection in view
    view_codes: np.ndarray  # (R, P, M, 6L+3): encoded source-to-point direction
    uv: np.ndarray          # (R, P, M, Ne, 2) sample pixels


def encoded_width(token_dim: int, n_freqs: int = 10, sample_rgb: bool = False) -> int:
    per = 1 + 2 * n_freqs
    return token_dim + (3 if sample_rgb else 0) + 2 * per + 1 * per + 3 * per


class EpipolarTransformer(Module):
    def __init__(self, token_dim: int, dim: int, rng: SplitMix64, heads: int = 4, ffn_dim: int = 128,
                 n_stage1: int = 4, n_stage2: int = 2, n_freqs: int = 10, sample_rgb: bool = False):
        super().__init__()
        self.dim = dim
        self.n_freqs = n_freqs
        self.sample_rgb = sample_rgb
        code = 3 * (1 + 2 * n_freqs)
        self.in_proj = self.add_child("in_proj", Linear(encoded_width(token_dim, n_freqs, sample_rgb), dim, rng))
        self.r0 = self.add_param("r0", rng.normal((dim,)) * 0.02)
        self.stage1_blocks = [self.add_child(f"e1_{i}", AttentionBlock(dim, heads, ffn_dim, rng))
                              for i in range(n_stage1)]
        self.w1 = self.add_child("w1", Linear(dim, 1, rng, bias=False))
        self.view_proj = self.add_child("view_proj", Linear(dim + code, dim, rng))
        self.stage2_blocks = [self.add_child(f"e3_{i}", AttentionBlock(dim, heads, ffn_dim, rng))
                              for i in range(n_stage2)]
        self.w2 = self.add_child("w2", Linear(dim, 1, rng, bias=False))

    # ------------------------------------------------------------------
    def build_features(self, tokens: Tensor, images: np.ndarray, poses: list[CameraPose],
                       points: np.ndarray, dirs: np.ndarray, depth01: np.ndarray,
                       n_samples: int, window_px: float) -> EpipolarFeatureBlock:
        """Gather per-sample features for every (ray, point, view, epipolar sample).

        tokens: (M, 49, C) edit-informed source tokens; images: (M, H, W, 3);
        points: (R, P, 3); dirs: (R, 3) target-ray directions; depth01: (R, P)
        point depths normalised to [0, 1] between near and far.
        """
        n_rays, n_pts = points.shape[:2]
        n_views = len(poses)
        c = tokens.shape[-1]
        pdirs = np.broadcast_to(dirs[:, None, :], points.shape)
        uv, mask, view_ok, mats, consts, codes = [], [], [], [], [], []
        for m, pose in enumerate(poses):
            s_uv, s_ok, offsets = epipolar_samples(points, pdirs, pose, n_samples, window_px)
            uv.append(s_uv)
            mask.append(s_ok)
            view_ok.append(s_ok[..., n_samples // 2])
            mats.append(token_sample_matrix(s_uv[..., 0] / pose.width, s_uv[..., 1] / pose.height))
            parts = []
            if self.sample_rgb:
                parts.append(sample_image(images[m], s_uv))
            rel = (s_uv - s_uv[..., n_samples // 2: n_samples // 2 + 1, :]) / window_px
            parts.append(fourier_encode(rel, self.n_freqs))
            parts.append(np.broadcast_to(fourier_encode(depth01[..., None], self.n_freqs)[:, :, None, :],
                                         (n_rays, n_pts, n_samples, 1 + 2 * self.n_freqs)))
            to_point = points - pose.center
            to_point /= np.linalg.norm(to_point, axis=-1, keepdims=True)
            code = fourier_encode(to_point, self.n_freqs)
            codes.append(code)
            parts.append(np.broadcast_to(code[:, :, None, :], (n_rays, n_pts, n_samples, code.shape[-1])))
            consts.append(np.concatenate(parts, axis=-1))
        mask_a = np.stack(mask, axis=2)
        tok = T.matmul(Tensor(np.stack(mats)), tokens)  # (M, R*P*Ne, C)
        tok = tok.reshape((n_views, n_rays, n_pts, n_samples, c)).transpose((1, 2, 0, 3, 4))
        const = np.stack(consts, axis=2).astype(T.default_dtype())
        feats = T.concat([tok, Tensor(const)], axis=-1)
        keep = Tensor(mask_a[..., None].astype(T.default_dtype()))
        proj = self.in_proj(feats * keep) * keep
        return EpipolarFeatureBlock(proj, mask_a, np.stack(view_ok, axis=2),
                                    np.stack(codes, axis=2).astype(T.default_dtype()),
                                    np.stack(uv, axis=2))

    def _weighted_sum(self, seq: Tensor, scorer: Linear, mask: np.ndarray):
        # scoring [r; e_i] with one linear map: the r half and the bias add the same
        # constant to every logit of a softmax row, so only the e_i half is kept
        rest = seq[:, 1:, :]
        logits = scorer(rest)
        weights = T.masked_softmax(logits.reshape(logits.shape[:2]), mask, axis=-1)
        out = (rest * weights.reshape(weights.shape + (1,))).sum(axis=1)
        return out, weights

    def _with_ray_token(self, x: Tensor, mask: np.ndarray):
        b = x.shape[0]
        r0 = T.broadcast_to(self.r0.reshape((1, 1, self.dim)), (b, 1, self.dim))
        seq = T.concat([r0, x], axis=1)
        full = np.concatenate([np.ones((b, 1), dtype=bool), mask], axis=1)
        return seq, full

    def stage1(self, block: EpipolarFeatureBlock):
        """(R, P, M, Ne, D) -> (R, P, M, D) plus per-view validity and alpha weights."""
        r, p, m, ne, d = block.features.shape
        mask = block.mask.reshape(-1, ne)
        seq, full = self._with_ray_token(block.features.reshape((-1, ne, d)), mask)
        for blk in self.stage1_blocks:
            seq = blk(seq, key_mask=full)
        out, alpha = self._weighted_sum(seq, self.w1, mask)
        view_ok = block.mask.any(axis=-1)
        return out.reshape((r, p, m, d)), view_ok, alpha.reshape((r, p, m, ne))

    def stage2(self, views: Tensor, view_codes: np.ndarray, view_ok: np.ndarray):
        """(R, P, M, D) -> (R, P, D) plus the empty-point flag and beta weights."""
        r, p, m, d = views.shape
        x = self.view_proj(T.concat([views, Tensor(view_codes)], axis=-1))
        mask = view_ok.reshape(-1, m)
        seq, full = self._with_ray_token(x.reshape((-1, m, d)), mask)
        for blk in self.stage2_blocks:
            seq = blk(seq, key_mask=full)
        out, beta = self._weighted_sum(seq, self.w2, mask)
        empty = ~view_ok.any(axis=-1)
        return out.reshape((r, p, d)), empty, beta.reshape((r, p, m))
