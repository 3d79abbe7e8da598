"""Finite-difference gradient checks for every differentiable operation,
each network module and an end-to-end micro pipeline (64-bit mode)."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

TOLERANCE = 1e-4
EPS = 1e-4
# ReLU networks have kinks; a 1e-4 step through many units regularly straddles one
KINK_EPS = 1e-6
DENOM_FLOOR = 1e-8


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return math.isfinite(self.max_rel_error) and self.max_rel_error < TOLERANCE


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = DENOM_FLOOR) -> float:
    """max_i |a_i - n_i| / max(floor, |a_i| + |n_i|)."""
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(floor, np.abs(analytic) + np.abs(numeric))))


def finite_diff_check(fn: Callable[..., Tensor], inputs: list[np.ndarray], eps: float = EPS,
                      max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Compare autodiff gradients of the scalar ``fn(*tensors)`` with central differences.

    Only float64 math is meaningful here; run inside ``tensor.precision(64)``.
    ``max_entries`` limits how many entries per input are probed (chosen at
    random) to bound the cost for large inputs. Returns the worst relative
    error over all inputs.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    params = [Tensor(x, requires_grad=True) for x in inputs]
    out = fn(*params)
    if out.data.size != 1:
        raise T.ShapeError(f"checked function must return a scalar, got {out.shape}")
    T.backward(out)
    worst = 0.0
    for i, x in enumerate(inputs):
        analytic = params[i].grad if params[i].grad is not None else np.zeros_like(x)
        flat_idx = np.arange(x.size)
        if max_entries is not None and x.size > max_entries:
            flat_idx = (rng or np.random.default_rng(0)).choice(x.size, max_entries, replace=False)
        numeric = np.zeros(len(flat_idx))
        for j, k in enumerate(flat_idx):
            vals = []
            for sign in (1.0, -1.0):
                probe = [Tensor(a) for a in inputs]
                shifted = x.copy().reshape(-1)
                shifted[k] += sign * eps
                probe[i] = Tensor(shifted.reshape(x.shape))
                with T.no_grad():
                    vals.append(float(fn(*probe).data))
            numeric[j] = (vals[0] - vals[1]) / (2 * eps)
        worst = max(worst, relative_error(analytic.reshape(-1)[flat_idx], numeric))
    return worst


def check_module(module, loss_fn: Callable[[], Tensor], max_entries: int = 4, seed: int = 0,
                 eps: float = KINK_EPS) -> float:
    """Finite-difference check of ``loss_fn`` with respect to a module's parameters."""
    rng = np.random.default_rng(seed)
    params = module.parameters()
    for p in params.values():
        p.grad = None
    T.backward(loss_fn())
    worst = 0.0
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        n = min(max_entries, p.size)
        idx = rng.choice(p.size, n, replace=False)
        numeric = np.zeros(n)
        base = p.data.copy()
        for j, k in enumerate(idx):
            vals = []
            for sign in (1.0, -1.0):
                shifted = base.copy().reshape(-1)
                shifted[k] += sign * eps
                p.data = shifted.reshape(base.shape)
                with T.no_grad():
                    vals.append(float(loss_fn().data))
            numeric[j] = (vals[0] - vals[1]) / (2 * eps)
        p.data = base
        worst = max(worst, relative_error(analytic.reshape(-1)[idx], numeric))
    return worst


# ---------------------------------------------------------------------------
# individual checks
# ---------------------------------------------------------------------------

def _probe(shape, rng):
    """Fixed random projection turning any tensor into a scalar."""
    return Tensor(rng.normal(size=shape))


def _op_checks(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    def unary(op, lo=-2.0, hi=2.0, shape=(3, 4)):
        x = rng.uniform(lo, hi, shape)
        w = _probe(shape, rng)
        return lambda: finite_diff_check(lambda a: (op(a) * w).sum(), [x])

    def binary(op, shapes=((3, 4), (4,)), positive_b=False):
        a = rng.normal(size=shapes[0])
        b = rng.uniform(0.5, 2.0, shapes[1]) if positive_b else rng.normal(size=shapes[1])
        out_shape = np.broadcast_shapes(*shapes)
        w = _probe(out_shape, rng)
        return lambda: finite_diff_check(lambda x, y: (op(x, y) * w).sum(), [a, b])

    x34 = rng.normal(size=(2, 3, 4))
    mask = np.array([[True, False, True, True], [False, False, False, False], [True, True, False, True]])
    relu_x = rng.uniform(0.1, 1.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
    w_mm = _probe((2, 3, 5), rng)
    w_lin = _probe((2, 3, 5), rng)
    w_ln = _probe((2, 3, 4), rng)
    w_sm = _probe((2, 3, 4), rng)
    w_cs = _probe((2, 3, 4), rng)
    w_cat = _probe((2, 3, 7), rng)
    w_stk = _probe((2, 2, 3, 4), rng)
    w_idx = _probe((2, 2, 4), rng)
    w_conv = _probe((1, 3, 3, 2), rng)
    w_red = _probe((2, 4), rng)
    w_flat = _probe((2, 12), rng)

    checks = {
        "add": binary(T.add),
        "sub": binary(T.sub),
        "mul": binary(T.mul),
        "div": binary(T.div, positive_b=True),
        "neg": unary(T.neg),
        "exp": unary(T.exp),
        "log": unary(T.log, 0.2, 3.0),
        "relu": lambda: finite_diff_check(lambda a: (T.relu(a) * Tensor(np.ones((3, 4)))).sum(), [relu_x]),
        "sigmoid": unary(T.sigmoid, -4, 4),
        "softplus": unary(T.softplus, -4, 4),
        "clip": lambda: finite_diff_check(lambda a: (T.clip(a, -0.5, 0.5) * Tensor(np.ones((3, 4)))).sum(),
                                          [relu_x * 0.4]),
        "matmul": lambda: finite_diff_check(lambda a, b: (T.matmul(a, b) * w_mm).sum(),
                                            [x34, rng.normal(size=(4, 5))]),
        "linear": lambda: finite_diff_check(lambda a, b, c: (T.linear(a, b, c) * w_lin).sum(),
                                            [x34, rng.normal(size=(4, 5)), rng.normal(size=5)]),
        "sum_mean": lambda: finite_diff_check(lambda a: (a.sum(axis=1) * w_red).sum() + a.mean() * 3.0,
                                              [x34]),
        "reshape_transpose": lambda: finite_diff_check(
            lambda a: (a.transpose((0, 2, 1)).reshape((2, 12)) * w_flat).sum(), [x34]),
        "getitem": lambda: finite_diff_check(lambda a: (a[:, np.array([0, 2])] * w_idx).sum(), [x34]),
        "concat": lambda: finite_diff_check(lambda a, b: (T.concat([a, b], axis=-1) * w_cat).sum(),
                                            [x34, rng.normal(size=(2, 3, 3))]),
        "stack": lambda: finite_diff_check(lambda a, b: (T.stack([a, b], axis=1) * w_stk).sum(),
                                           [x34, rng.normal(size=(2, 3, 4))]),
        "broadcast_to": lambda: finite_diff_check(
            lambda a: (T.broadcast_to(a, (2, 3, 4)) * w_sm).sum(), [rng.normal(size=(3, 1))]),
        "exclusive_cumsum": lambda: finite_diff_check(lambda a: (T.exclusive_cumsum(a) * w_cs).sum(), [x34]),
        "masked_softmax": lambda: finite_diff_check(
            lambda a: (T.masked_softmax(a, mask, axis=-1) * w_sm).sum(), [x34]),
        "log_softmax": lambda: finite_diff_check(lambda a: (T.log_softmax(a) * w_sm).sum(), [x34]),
        "layer_norm": lambda: finite_diff_check(lambda a, g, b: (T.layer_norm(a, g, b) * w_ln).sum(),
                                                [x34, rng.uniform(0.5, 1.5, 4), rng.normal(size=4)]),
        "conv2d": lambda: finite_diff_check(lambda a, k, b: (T.conv2d(a, k, b, stride=2, pad=1) * w_conv).sum(),
                                            [rng.normal(size=(1, 6, 6, 3)), rng.normal(size=(3, 3, 3, 2)),
                                             rng.normal(size=2)]),
    }
    return checks


def _geometry_checks(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    from .encoder import pool_tokens, token_grid_sample
    from .geometry import bilinear_sample
    from .ray_transformer import volume_weights

    u = rng.uniform(0.1, 0.9, 5)
    v = rng.uniform(0.1, 0.9, 5)
    w5 = _probe((5, 3), rng)
    w_tok = _probe((2, 49, 3), rng)
    w_vw = _probe((4, 6), rng)
    return {
        "bilinear_sample": lambda: finite_diff_check(
            lambda f: (bilinear_sample(f, u * 6, v * 5) * w5).sum(), [rng.normal(size=(5, 6, 3))]),
        "token_grid_sample": lambda: finite_diff_check(
            lambda t: (token_grid_sample(t, u, v) * w5).sum(), [rng.normal(size=(49, 3))]),
        "pool_tokens": lambda: finite_diff_check(
            lambda f: (pool_tokens(f) * w_tok).sum(), [rng.normal(size=(2, 9, 8, 3))]),
        "volume_weights": lambda: finite_diff_check(
            lambda s, d: (volume_weights(s, d) * w_vw).sum(),
            [rng.uniform(0.0, 3.0, (4, 6)), rng.uniform(0.05, 0.5, (4, 6))]),
    }


def _module_checks(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    from .edit_transformer import EditTransformer
    from .encoder import Encoder
    from .nn import AttentionBlock
    from .ray_transformer import RayTransformer
    from .rng import SplitMix64

    srng = SplitMix64(7)
    blk = AttentionBlock(8, 2, 16, srng)
    x = Tensor(rng.normal(size=(3, 5, 8)))
    ctx = Tensor(rng.normal(size=(1, 4, 8)))
    key_mask = rng.random((3, 5)) > 0.3
    key_mask[:, 0] = True
    w_blk = _probe((3, 5, 8), rng)

    enc = Encoder(4, srng, widths=(3, 4))
    img = rng.uniform(0, 1, (1, 16, 16, 3))
    w_enc = _probe((1, 2, 2, 4), rng)

    edit = EditTransformer(8, srng, heads=2, ffn_dim=16)
    start = Tensor(rng.normal(size=(1, 49, 8)))
    src = Tensor(rng.normal(size=(2, 49, 8)))
    w_edit = _probe((2, 49, 8), rng)

    ray = RayTransformer(8, srng, heads=2, ffn_dim=16, rgb_hidden=8, density_hidden=4)
    feats = Tensor(rng.normal(size=(2, 5, 8)))
    pvalid = np.ones((2, 5), dtype=bool)
    pvalid[1, 3] = False
    deltas = rng.uniform(0.1, 0.4, (2, 5))
    w_rgb = _probe((2, 3), rng)
    w_w = _probe((2, 5), rng)

    def ray_loss():
        h = ray.ray_attention(feats, pvalid)
        rgb, _ = ray.predict_rgb(h, pvalid)
        wts, _ = ray.hitting_weights(h, deltas, pvalid)
        return (rgb * w_rgb).sum() + (wts * w_w).sum()

    return {
        "attention_self": lambda: check_module(blk, lambda: (blk(x, key_mask=key_mask) * w_blk).sum()),
        "attention_cross": lambda: check_module(blk, lambda: (blk(x, context=ctx) * w_blk).sum()),
        "attention_input": lambda: finite_diff_check(
            lambda a, c: (blk(a, context=c) * w_blk).sum(), [x.data, ctx.data]),
        "encoder": lambda: check_module(enc, lambda: (enc(img) * w_enc).sum()),
        "edit_transformer": lambda: check_module(edit, lambda: (edit(start, src) * w_edit).sum()),
        "ray_transformer": lambda: check_module(ray, ray_loss),
    }


def micro_pipeline(seed: int = 0):
    """The smallest complete renderer: 2 rays, N_P=4, M=2, N_e=3, 49 tokens, D=8."""
    from .geometry import CameraPose, rays_for_pixels, sample_depths
    from .model import FreeEditor, ModelConfig
    from .rng import SplitMix64

    cfg = ModelConfig(token_dim=8, dim=8, edit_heads=2, edit_ffn=16, n_self=1, n_cross=1, epi_heads=2,
                      epi_ffn=16, n_stage1=1, n_stage2=1, ray_heads=2, ray_ffn=16, n_ray_blocks=1,
                      rgb_hidden=8, density_hidden=4, n_freqs=2, n_epipolar=3, encoder_widths=(4, 4),
                      sample_rgb=True, seed=seed)
    model = FreeEditor(cfg)
    rng = SplitMix64(seed + 11)
    size = 16
    poses = [CameraPose.look_at([4 * math.cos(a), 4 * math.sin(a), 2.0], [0, 0, 0], [0, 0, 1],
                                20.0, 20.0, size, size) for a in (0.0, 0.35, -0.3)]
    images = rng.random((3, size, size, 3))
    rays = rays_for_pixels(poses[0], [7, 9], [8, 6], 2.5, 6.0)
    depths = sample_depths(2.5, 6.0, 2, 4, "stratified", rng)
    return model, images, poses, rays, depths


def _pipeline_check(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    model, images, poses, rays, depths = micro_pipeline()
    w_rgb = _probe((2, 3), rng)
    w_w = _probe((2, 4), rng)

    def loss():
        out = model(images[1], images[[0, 2]], [poses[0], poses[2]], rays, depths)
        return (out.rgb * w_rgb).sum() + (out.weights * w_w).sum()

    def shapes_ok():
        out = model(images[1], images[[0, 2]], [poses[0], poses[2]], rays, depths)
        want = {"epipolar": (2, 4, 2, 3, 8), "views": (2, 4, 2, 8), "points": (2, 4, 8), "rgb": (2, 3)}
        if out.shapes != want:
            raise T.ShapeError(f"micro pipeline shapes {out.shapes} != {want}")

    def run():
        shapes_ok()
        return check_module(model, loss, max_entries=2)

    return {"pipeline": run}


def _loss_checks(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    from .losses import (PointPairSet, consistency_loss, entropy_loss, jsd_logits, photometric_loss,
                         self_view_loss, total_loss, LossWeights)

    valid = np.array([True, False, True, True])
    gt = rng.uniform(0, 1, (4, 3))
    idx = np.array([[0, 0, 2], [1, 2, 2]])
    pairs = PointPairSet(idx, np.zeros((2, 3)), np.array([[0.2, 0.3, 0.5], [0.6, 0.1, 0.3]]))
    lw = LossWeights(con_start_iter=0)
    return {
        "jsd": lambda: finite_diff_check(lambda a, b: jsd_logits(a, b).sum(),
                                         [rng.normal(size=(3, 6)), rng.normal(size=(3, 6))]),
        "consistency": lambda: finite_diff_check(lambda a, b: consistency_loss(a, b, pairs),
                                                 [rng.normal(size=(2, 3, 2, 3)), rng.normal(size=(2, 3, 2, 3))]),
        "entropy": lambda: finite_diff_check(lambda w: entropy_loss(w, valid),
                                             [rng.uniform(0.05, 0.9, (4, 5))]),
        "omega_softmax": lambda: finite_diff_check(
            lambda d: (T.softmax(-d) * Tensor(np.arange(5.0))).sum(), [rng.uniform(0, 2, 5)]),
        "photometric": lambda: finite_diff_check(lambda p: photometric_loss(p, gt, valid),
                                                 [rng.uniform(0, 1, (4, 3))]),
        "self_view": lambda: finite_diff_check(lambda a, b: self_view_loss(a, b, valid, valid),
                                               [rng.uniform(0, 1, (4, 3)), rng.uniform(0, 1, (4, 3))]),
        "total_loss": lambda: finite_diff_check(
            lambda a, b, c, d: total_loss({"mse": a.sum(), "con": b.sum(), "self": c.sum(), "en": d.sum()}, lw, 1),
            [rng.normal(size=2) for _ in range(4)]),
    }


def run_checks(full: bool = False, seed: int = 0, only: list[str] | None = None) -> list[CheckResult]:
    """Run the harness in 64-bit mode and return one result per component."""
    results = []
    with T.precision(64):
        rng = np.random.default_rng(seed)
        checks: dict[str, Callable[[], float]] = {}
        checks.update(_op_checks(rng))
        checks.update(_geometry_checks(rng))
        checks.update(_module_checks(rng))
        checks.update(_pipeline_check(rng))
        if full:
            checks.update({f"loss.{k}": v for k, v in _loss_checks(rng).items()})
        for name, check in checks.items():
            if only and name not in only:
                continue
            t0 = time.perf_counter()
            try:
                err = float(check())
            except Exception as exc:  # a crash is a failed check, reported by name
                err = float("nan")
                name = f"{name} ({type(exc).__name__}: {exc})"
            results.append(CheckResult(name, err, time.perf_counter() - t0))
    return results


def format_results(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{r.name:<{width}}  {r.max_rel_error:.3e}  {'PASS' if r.passed else 'FAIL'}" for r in results]
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed (tolerance {TOLERANCE:g})")
    return "\n".join(lines)
