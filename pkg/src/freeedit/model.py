"""The full generalised renderer: encoder -> Edit Transformer -> epipolar
aggregation -> ray transformer -> colour (and hitting weights)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .edit_transformer import EditTransformer
from .encoder import STRIDE, Encoder, pool_tokens, token_sample_matrix
from .epipolar import EpipolarTransformer
from .geometry import CameraPose, RayBatch, project_points, sample_points
from .nn import Module
from .ray_transformer import MIN_VALID_POINTS, RayTransformer
from .rng import SplitMix64
from .tensor import ContractError, Tensor


@dataclass
class ModelConfig:
    token_dim: int = 64
    dim: int = 64
    edit_heads: int = 8
    edit_ffn: int = 256
    n_self: int = 2
    n_cross: int = 2
    epi_heads: int = 4
    epi_ffn: int = 128
    n_stage1: int = 4
    n_stage2: int = 2
    ray_heads: int = 4
    ray_ffn: int = 128
    n_ray_blocks: int = 2
    rgb_hidden: int = 64
    density_hidden: int = 32
    n_freqs: int = 10
    n_epipolar: int = 5
    epipolar_window: float = 2.0  # in feature-map cells (x8 image pixels)
    sample_rgb: bool = False
    encoder_widths: tuple = (32, 64)
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        if "encoder_widths" in kw:
            kw["encoder_widths"] = tuple(kw["encoder_widths"])
        return cls(**kw)


@dataclass
class RenderOutput:
    rgb: Tensor                 # (R, 3)
    weights: Tensor             # (R, P) hitting probabilities
    sigma: Tensor               # (R, P)
    ray_valid: np.ndarray       # (R,) at least MIN_VALID_POINTS valid points
    point_valid: np.ndarray     # (R, P)
    alpha: Tensor | None = None
    beta: Tensor | None = None
    shapes: dict = field(default_factory=dict)


class FreeEditor(Module):
    """Parameter groups are the children ``enc``, ``edit``, ``epi`` and ``ray``."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        rng = SplitMix64(cfg.seed)
        self.encoder = self.add_child("enc", Encoder(cfg.token_dim, rng, cfg.encoder_widths))
        self.edit = self.add_child("edit", EditTransformer(
            cfg.token_dim, rng, cfg.edit_heads, cfg.edit_ffn, cfg.n_self, cfg.n_cross))
        self.epi = self.add_child("epi", EpipolarTransformer(
            cfg.token_dim, cfg.dim, rng, cfg.epi_heads, cfg.epi_ffn, cfg.n_stage1, cfg.n_stage2,
            cfg.n_freqs, cfg.sample_rgb))
        self.ray = self.add_child("ray", RayTransformer(
            cfg.dim, rng, cfg.ray_heads, cfg.ray_ffn, cfg.n_ray_blocks, cfg.rgb_hidden, cfg.density_hidden))

    def groups(self) -> dict[str, dict[str, Tensor]]:
        return {name: child.parameters(f"{name}.") for name, child in self._children.items()}

    def source_tokens(self, start_image: np.ndarray, source_images: np.ndarray) -> Tensor:
        """Edit-informed tokens h_m, shape (M, 49, C)."""
        source_images = np.asarray(source_images)
        if len(source_images) == 0:
            raise ContractError("at least one source view is required")
        imgs = np.concatenate([np.asarray(start_image)[None], source_images], axis=0)
        tokens = pool_tokens(self.encoder(imgs))
        return self.edit(tokens[0:1], tokens[1:])

    def render(self, tokens: Tensor, source_images: np.ndarray, poses: list[CameraPose],
               rays: RayBatch, depths: np.ndarray) -> RenderOutput:
        cfg = self.cfg
        samples = sample_points(rays, depths.shape[-1], depths=depths)
        depth01 = (depths - rays.near) / (rays.far - rays.near)
        block = self.epi.build_features(tokens, source_images, poses, samples.points, rays.directions,
                                        depth01, cfg.n_epipolar, cfg.epipolar_window * STRIDE)
        views, view_ok, alpha = self.epi.stage1(block)
        point_feats, empty, beta = self.epi.stage2(views, block.view_codes, view_ok)
        point_valid = ~empty
        x = self.ray.ray_attention(point_feats, point_valid)
        rgb, _ = self.ray.predict_rgb(x, point_valid)
        weights, sigma = self.ray.hitting_weights(x, samples.deltas, point_valid)
        ray_valid = point_valid.sum(axis=-1) >= MIN_VALID_POINTS
        shapes = {"epipolar": block.features.shape, "views": views.shape,
                  "points": point_feats.shape, "rgb": rgb.shape}
        return RenderOutput(rgb, weights, sigma, ray_valid, point_valid, alpha, beta, shapes)

    def point_features(self, tokens: Tensor, poses: list[CameraPose], points: np.ndarray) -> Tensor:
        """Token features h_m(proj_m(x)) for (R, P, 3) points -> (R, P, M, C); out-of-view entries are 0."""
        r, p = points.shape[:2]
        mats, keep = [], []
        for pose in poses:
            uv, _, ok = project_points(points, pose)
            mats.append(token_sample_matrix(uv[..., 0] / pose.width, uv[..., 1] / pose.height))
            keep.append(ok)
        feats = T.matmul(Tensor(np.stack(mats)), tokens)  # (M, R*P, C)
        feats = feats.reshape((len(poses), r, p, tokens.shape[-1])).transpose((1, 2, 0, 3))
        mask = np.stack(keep, axis=2)[..., None].astype(T.default_dtype())
        return feats * Tensor(mask)

    def __call__(self, start_image, source_images, poses, rays, depths) -> RenderOutput:
        tokens = self.source_tokens(start_image, source_images)
        return self.render(tokens, np.asarray(source_images), poses, rays, depths)

    # -- persistence -------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise T.ShapeError(f"{name}: checkpoint shape {arr.shape} != model {p.shape}")
        for name, p in params.items():
            p.data = np.array(state[name], dtype=p.dtype)
