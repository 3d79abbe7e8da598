"""Training objectives: photometric, multi-view consistency (weighted JSD),
self-view and hitting-weight entropy terms, plus their weighted sum."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor

LN2 = math.log(2.0)
ENTROPY_CLAMP = 1.0 - 1e-6
TERMS = ("mse", "con", "self", "en")


class TrainingAbort(RuntimeError):
    """A loss component became non-finite."""

    def __init__(self, term: str, parts: dict[str, float]):
        self.term = term
        self.parts = parts
        detail = ", ".join(f"{k}={v!r}" for k, v in parts.items())
        super().__init__(f"non-finite loss term {term!r} ({detail})")


@dataclass
class LossWeights:
    lambda_c: float = 5e-4
    lambda_s: float = 1e-3
    lambda_e: float = 1e-4
    con_start_iter: int = 500

    def __post_init__(self):
        for name in ("lambda_c", "lambda_s", "lambda_e"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")


@dataclass
class PointPairSet:
    """For every sample p of one ray: its partner index on the other ray,
    the distance between the two points and the softmax(-d) weight."""

    index: np.ndarray     # (..., P) int
    distance: np.ndarray  # (..., P)
    weights: np.ndarray   # (..., P), sums to 1 over the last axis


def _value(x) -> float:
    return float(x.data if isinstance(x, Tensor) else x)


def _select(x: Tensor, keep: np.ndarray) -> Tensor:
    idx = np.flatnonzero(keep)
    return x if len(idx) == len(keep) else x[idx]


def photometric_loss(pred: Tensor, gt, valid: np.ndarray) -> Tensor:
    """Mean over valid rays of the per-ray squared colour error."""
    pred = T._as_tensor(pred)
    gt = np.asarray(gt, dtype=pred.dtype)
    valid = np.asarray(valid, dtype=bool)
    if pred.shape != gt.shape:
        raise T.ShapeError(f"prediction {pred.shape} vs target {gt.shape}")
    if not valid.any():
        raise ContractError("photometric loss needs at least one valid ray")
    diff = _select(pred, valid) - Tensor(gt[valid])
    return (diff * diff).sum(axis=-1).mean()


def self_view_loss(rgb_a: Tensor, rgb_b: Tensor, valid_a: np.ndarray, valid_b: np.ndarray) -> Tensor:
    """Mean per-ray squared difference between two renders of the same rays."""
    both = np.asarray(valid_a, dtype=bool) & np.asarray(valid_b, dtype=bool)
    if not both.any():
        raise ContractError("no ray is valid in both renders")
    diff = _select(T._as_tensor(rgb_a), both) - _select(T._as_tensor(rgb_b), both)
    return (diff * diff).sum(axis=-1).mean()


def entropy_loss(w: Tensor, valid: np.ndarray | None = None) -> Tensor:
    """-sum_i w_i log(1 - w_i) per ray, averaged over valid rays."""
    w = T._as_tensor(w)
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if not valid.any():
            return T.tensor(0.0)
        w = _select(w, valid)
    wc = T.clip(w, None, ENTROPY_CLAMP)
    per_ray = -(w * T.log(1.0 - wc)).sum(axis=-1)
    return per_ray.mean()


def nearest_point_pairs(points_a: np.ndarray, points_b: np.ndarray) -> PointPairSet:
    """Pair every point of ``points_a`` (..., P, 3) with its nearest point in
    ``points_b`` (..., P, 3); ties go to the lower index."""
    points_a = np.asarray(points_a, dtype=np.float64)
    points_b = np.asarray(points_b, dtype=np.float64)
    d = np.linalg.norm(points_a[..., :, None, :] - points_b[..., None, :, :], axis=-1)
    index = np.argmin(d, axis=-1)  # first minimum wins
    dist = np.take_along_axis(d, index[..., None], axis=-1)[..., 0]
    z = -dist - (-dist).max(axis=-1, keepdims=True)
    e = np.exp(z)
    return PointPairSet(index, dist, e / e.sum(axis=-1, keepdims=True))


def _check_distribution(p: np.ndarray, name: str) -> None:
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ContractError(f"{name} has negative or non-finite entries")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise ContractError(f"{name} does not sum to 1")


def jsd(p, q):
    """Jensen-Shannon divergence (natural log) along the last axis; 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise T.ShapeError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    _check_distribution(p, "p")
    _check_distribution(q, "q")
    m = 0.5 * (p + q)

    def kl(a):
        safe = np.where(a > 0, a, 1.0)
        return np.where(a > 0, a * np.log(safe / np.where(a > 0, m, 1.0)), 0.0).sum(axis=-1)

    out = 0.5 * kl(p) + 0.5 * kl(q)
    return float(out) if out.ndim == 0 else out


def jsd_logits(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """JSD between softmax(a) and softmax(b), computed in log space."""
    lp = T.log_softmax(a, axis)
    lq = T.log_softmax(b, axis)
    lm = lp + T.softplus(lq - lp) - LN2  # log((p + q) / 2)
    p = T.exp(lp)
    q = T.exp(lq)
    return 0.5 * (p * (lp - lm)).sum(axis=axis) + 0.5 * (q * (lq - lm)).sum(axis=axis)


def consistency_loss(feats_a: Tensor, feats_b: Tensor, pairs: PointPairSet,
                     valid: np.ndarray | None = None) -> Tensor:
    """Weighted JSD between per-point view-feature sets of neighbouring rays.

    feats_a, feats_b: (R, P, M, C) features of the two rays' samples. Each
    point's M x C features are flattened and softmax-normalised; the JSD of
    every pair is weighted by ``pairs.weights`` and summed per ray, then
    averaged over the (valid) rays.
    """
    r, p = feats_a.shape[:2]
    flat = int(np.prod(feats_a.shape[2:]))
    rows = np.arange(r)[:, None]
    partner = feats_b[rows, pairs.index] if feats_b.shape[:2] == (r, p) else None
    if partner is None:
        raise T.ShapeError(f"feature sets differ: {feats_a.shape} vs {feats_b.shape}")
    per_point = jsd_logits(feats_a.reshape((r, p, flat)), partner.reshape((r, p, flat)))
    per_ray = (per_point * Tensor(pairs.weights.astype(per_point.dtype))).sum(axis=-1)
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if not valid.any():
            return T.tensor(0.0)
        per_ray = _select(per_ray, valid)
    return per_ray.mean()


def total_loss(parts: dict, weights: LossWeights, iteration: int) -> Tensor | float:
    """L_mse + lambda_c L_con + lambda_s L_self + lambda_e L_en.

    ``parts`` maps "mse", "con", "self", "en" to scalars or scalar tensors;
    missing terms count as 0. The consistency term is dropped before
    ``weights.con_start_iter``. Plain numbers in, plain float out.
    """
    values = {k: _value(parts[k]) if k in parts else 0.0 for k in TERMS}
    for k in TERMS:
        if not math.isfinite(values[k]):
            raise TrainingAbort(k, values)
    scale = {"mse": 1.0, "con": weights.lambda_c if iteration >= weights.con_start_iter else 0.0,
             "self": weights.lambda_s, "en": weights.lambda_e}
    if not any(isinstance(v, Tensor) for v in parts.values()):
        return sum(values[k] * scale[k] for k in TERMS)
    total = None
    for k in TERMS:
        if k not in parts or scale[k] == 0.0:
            continue
        term = T._as_tensor(parts[k]) * scale[k]
        total = term if total is None else total + term
    return total if total is not None else T.tensor(0.0)
