"""Training loop, learning-rate schedule, checkpoints and inference rendering."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointFormatError, atomic_write, load_tensors, save_tensors
from .geometry import CameraPose, rays_for_pixels, sample_depths, sample_points, scene_bounds
from .losses import (
    LossWeights,
    consistency_loss,
    entropy_loss,
    nearest_point_pairs,
    photometric_loss,
    self_view_loss,
    total_loss,
)
from .model import FreeEditor, ModelConfig
from .optim import AdamState, adam_step
from .rng import SplitMix64
from .scene import EDIT_NAMES, Scene, apply_edit_oracle, select_disjoint_sources, select_views
from .tensor import ContractError

LOG_COLUMNS = ("iter", "lr", "L_mse", "L_con", "L_self", "L_en", "L_tot", "wallclock_ms")
GROUP_LR_FIELDS = {"enc": "lr_encoder", "edit": "lr_edit", "epi": "lr_epipolar", "ray": "lr_ray"}
CHECKPOINT_KIND = "freeedit-train"


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    iters: int = 2000
    rays_per_batch: int = 512
    scenes_per_batch: int = 2
    m_lo: int = 3
    m_hi: int = 4
    n_points: int = 32
    lr_edit: float = 2e-4
    lr_epipolar: float = 1e-4
    lr_ray: float = 5e-4
    lr_encoder: float = 1e-4
    warmup_iters: int = 200
    lambda_c: float = 5e-4
    lambda_s: float = 1e-3
    lambda_e: float = 1e-4
    con_start_iter: int = 500
    seed: int = 0
    freeze_encoder: bool = False
    edits: tuple = EDIT_NAMES
    held_out: tuple = ()
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        for name in ("iters", "rays_per_batch", "scenes_per_batch", "m_lo", "m_hi", "n_points"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.m_lo > self.m_hi:
            raise ConfigError(f"m_lo ({self.m_lo}) exceeds m_hi ({self.m_hi})")
        if self.rays_per_batch % self.scenes_per_batch:
            raise ConfigError("rays_per_batch must be divisible by scenes_per_batch")
        if self.n_points < 2:
            raise ConfigError("n_points must be at least 2")
        if not self.edits:
            raise ConfigError("at least one edit is required")
        if self.warmup_iters < 0:
            raise ConfigError("warmup_iters must be >= 0")
        self.loss_weights()

    def loss_weights(self) -> LossWeights:
        try:
            return LossWeights(self.lambda_c, self.lambda_s, self.lambda_e, self.con_start_iter)
        except ContractError as exc:
            raise ConfigError(str(exc)) from None

    def min_views(self) -> int:
        """Views a scene needs: target, starting view and two disjoint source sets."""
        return 2 * self.m_hi + 2 + len(self.held_out)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "model"}
        d["edits"] = list(self.edits)
        d["held_out"] = list(self.held_out)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kw = {k: v for k, v in d.items() if k != "model"}
        kw["edits"] = tuple(kw.get("edits", EDIT_NAMES))
        kw["held_out"] = tuple(kw.get("held_out", ()))
        return cls(model=ModelConfig.from_dict(d.get("model", {})), **kw)


def _parse_value(text: str, default):
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        items = [s.strip() for s in text.split(",") if s.strip()]
        if default and isinstance(default[0], str) or not default and text and not text[0].isdigit():
            return tuple(items)
        return tuple(int(s) for s in items)
    return text


_MODEL_DEFAULTS = ModelConfig()
_TRAIN_DEFAULTS = TrainConfig()


def apply_overrides(cfg: TrainConfig, pairs: list[tuple[str, str]], source: str = "<override>",
                    linenos: list[int] | None = None) -> TrainConfig:
    """Set fields from ``key = value`` pairs; ``model.<field>`` addresses the model config."""
    train_names = {f.name for f in fields(TrainConfig)} - {"model"}
    model_names = {f.name for f in fields(ModelConfig)}
    for i, (key, value) in enumerate(pairs):
        where = f"{source}:{linenos[i]}" if linenos else source
        try:
            if key.startswith("model."):
                name = key[6:]
                if name not in model_names:
                    raise KeyError(name)
                default = getattr(_MODEL_DEFAULTS, name)
                setattr(cfg.model, name, _parse_value(value, default))
            elif key in train_names:
                setattr(cfg, key, _parse_value(value, getattr(_TRAIN_DEFAULTS, key)))
            else:
                raise KeyError(key)
        except KeyError:
            raise ConfigError(f"{where}: unknown config key {key!r}") from None
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None
    return cfg


def parse_config(text: str, source: str = "<config>", base: TrainConfig | None = None) -> TrainConfig:
    cfg = base or TrainConfig(model=ModelConfig())
    pairs, linenos = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (s.strip() for s in stripped.split("=", 1))
        pairs.append((key, value))
        linenos.append(lineno)
    apply_overrides(cfg, pairs, source, linenos)
    return cfg


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), str(path))


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        if f.name == "model":
            continue
        lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    for f in fields(ModelConfig):
        lines.append(f"model.{f.name} = {_format_value(getattr(cfg.model, f.name))}")
    return "\n".join(lines) + "\n"


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def lr_schedule(iteration: int, base_lr: float, warmup: int, total: int) -> float:
    """Linear warm-up to ``base_lr`` then cosine decay to 0 at ``total``."""
    if iteration < warmup:
        return base_lr * iteration / warmup
    if total <= warmup:
        return base_lr
    frac = min(1.0, (iteration - warmup) / (total - warmup))
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class TrainState:
    config: TrainConfig
    model: FreeEditor
    adam: AdamState
    rng: SplitMix64
    iteration: int = 0
    log: list[tuple] = field(default_factory=list)

    def trainable(self) -> dict:
        params = self.model.parameters()
        if self.config.freeze_encoder:
            params = {k: v for k, v in params.items() if not k.startswith("enc.")}
        return params

    def group_lrs(self, iteration: int) -> dict[str, float]:
        cfg = self.config
        return {g: lr_schedule(iteration, getattr(cfg, attr), cfg.warmup_iters, cfg.iters)
                for g, attr in GROUP_LR_FIELDS.items()}


def init_state(cfg: TrainConfig) -> TrainState:
    cfg.validate()
    cfg.model.seed = cfg.seed
    model = FreeEditor(cfg.model)
    return TrainState(cfg, model, AdamState(), SplitMix64(~cfg.seed & (2 ** 64 - 1)))


@dataclass
class SceneBatch:
    """Everything drawn at random for one scene in one iteration."""

    edit: str
    target: int
    start: int
    sources_a: list[int]
    sources_b: list[int]
    px: np.ndarray
    py: np.ndarray
    depths: np.ndarray


def draw_batch(state: TrainState, scene: Scene, n_rays: int, need_b: bool) -> SceneBatch:
    cfg, rng = state.config, state.rng
    edits = [e for e in cfg.edits if e in scene.edits]
    if not edits:
        raise KeyError(f"scene {scene.id} has none of the configured edits {list(cfg.edits)}")
    edit = edits[rng.integers(0, len(edits))]
    held = set(cfg.held_out)
    train_views = [i for i in range(scene.n_views) if i not in held]
    target = train_views[rng.integers(0, len(train_views))]
    M = rng.integers(cfg.m_lo, cfg.m_hi + 1)
    start, src_a = select_views(scene, target, rng, M, exclude=held)
    src_b = select_disjoint_sources(scene, target, rng, M, [start, *src_a], exclude=held) if need_b else []
    return SceneBatch(edit, target, start, src_a, src_b, *_draw_rays(rng, scene, n_rays, cfg.n_points))


def _draw_rays(rng: SplitMix64, scene: Scene, n_rays: int, n_points: int):
    px = rng.integers(0, scene.width, n_rays)
    py = rng.integers(0, scene.height, n_rays)
    depths = sample_depths(0.0, 1.0, n_rays, n_points, "stratified", rng)  # rescaled to [near, far]
    return px, py, depths


def neighbour_pixels(px: np.ndarray, width: int) -> np.ndarray:
    """Horizontally adjacent pixel (left neighbour on the last column)."""
    return np.where(px + 1 < width, px + 1, px - 1)


def scene_losses(state: TrainState, scene: Scene, batch: SceneBatch, iteration: int, retry=None) -> dict:
    """Forward one scene's rays and return the loss parts (tensors) plus diagnostics."""
    cfg, model = state.config, state.model
    weights = cfg.loss_weights()
    pose_t = scene.poses[batch.target]
    near, far = scene_bounds(pose_t, scene.center, scene.radius)
    edited = scene.edited(batch.edit)
    start_img = edited[batch.start]
    poses_a = [scene.poses[i] for i in batch.sources_a]
    imgs_a = scene.images[batch.sources_a]
    tokens_a = model.source_tokens(start_img, imgs_a)

    px, py, unit = batch.px, batch.py, batch.depths
    for attempt in range(2):
        depths = near + (far - near) * unit
        rays = rays_for_pixels(pose_t, px, py, near, far)
        out_a = model.render(tokens_a, imgs_a, poses_a, rays, depths)
        if out_a.ray_valid.any():
            break
        if attempt == 0:
            px, py, unit = _draw_rays(state.rng, scene, len(px), cfg.n_points)
    else:
        raise ContractError(f"scene {scene.id} view {batch.target}: every ray invalid after resampling")

    parts = {"mse": photometric_loss(out_a.rgb, edited[batch.target][py, px], out_a.ray_valid),
             "en": entropy_loss(out_a.weights, out_a.ray_valid)}
    if weights.lambda_c > 0 and iteration >= weights.con_start_iter:
        pts = sample_points(rays, cfg.n_points, depths=depths).points
        nb = rays_for_pixels(pose_t, neighbour_pixels(px, scene.width), py, near, far)
        pts_nb = sample_points(nb, cfg.n_points, depths=depths).points
        pairs = nearest_point_pairs(pts, pts_nb)
        parts["con"] = consistency_loss(model.point_features(tokens_a, poses_a, pts),
                                        model.point_features(tokens_a, poses_a, pts_nb),
                                        pairs, out_a.ray_valid)
    if weights.lambda_s > 0 and batch.sources_b:
        poses_b = [scene.poses[i] for i in batch.sources_b]
        imgs_b = scene.images[batch.sources_b]
        out_b = model.render(model.source_tokens(start_img, imgs_b), imgs_b, poses_b, rays, depths)
        if (out_a.ray_valid & out_b.ray_valid).any():
            parts["self"] = self_view_loss(out_a.rgb, out_b.rgb, out_a.ray_valid, out_b.ray_valid)
    return parts


def _scalar(x) -> float:
    return float(x.data) if isinstance(x, T.Tensor) else float(x)


def train_step(state: TrainState, scenes: list[Scene]) -> dict[str, float]:
    """One optimisation step over ``scenes_per_batch`` scenes; returns the logged values."""
    cfg = state.config
    t0 = time.perf_counter()
    state.iteration += 1
    it = state.iteration
    if len(scenes) < cfg.scenes_per_batch:
        raise ContractError(f"need {cfg.scenes_per_batch} scenes per batch, have {len(scenes)}")
    if len(scenes) == cfg.scenes_per_batch:
        picked = list(range(len(scenes)))
    else:
        picked = state.rng.choice(len(scenes), cfg.scenes_per_batch)
    weights = cfg.loss_weights()
    n_rays = cfg.rays_per_batch // cfg.scenes_per_batch
    trainable = state.trainable()
    params = state.model.parameters()
    frozen = [p for name, p in params.items() if name not in trainable]
    for p in frozen:
        p.requires_grad = False
    T.zero_grad(trainable.values())
    sums = dict.fromkeys(("mse", "con", "self", "en", "tot"), 0.0)
    try:
        for idx in picked:
            scene = scenes[idx]
            batch = draw_batch(state, scene, n_rays, weights.lambda_s > 0)
            parts = scene_losses(state, scene, batch, it)
            loss = total_loss(parts, weights, it)
            T.backward(loss * (1.0 / len(picked)))
            for k in ("mse", "con", "self", "en"):
                sums[k] += _scalar(parts[k]) if k in parts else 0.0
            sums["tot"] += _scalar(loss)
    finally:
        for p in frozen:
            p.requires_grad = True
    lrs = state.group_lrs(it)
    rates = {name: lrs[name.split(".", 1)[0]] for name in trainable}
    adam_step(trainable, state.adam, rates)
    n = len(picked)
    row = (it, lrs["edit"], sums["mse"] / n, sums["con"] / n, sums["self"] / n, sums["en"] / n,
           sums["tot"] / n, int(round((time.perf_counter() - t0) * 1000)))
    state.log.append(row)
    return dict(zip(LOG_COLUMNS, row))


# -- logs -------------------------------------------------------------------------

def format_log_row(row) -> str:
    it, lr, *losses, ms = row
    return "\t".join([str(it), repr(float(lr))] + [repr(float(v)) for v in losses] + [str(ms)])


def format_log(rows) -> str:
    return "".join(format_log_row(r) + "\n" for r in rows)


def parse_log(text: str) -> list[tuple]:
    rows = []
    for line in text.splitlines():
        if not line.strip() or line.startswith("iter"):
            continue
        f = line.split("\t")
        rows.append((int(f[0]), *(float(v) for v in f[1:7]), int(f[7])))
    return rows


def loss_columns(rows) -> list[tuple]:
    """Rows without the wall-clock column (the part that must be reproducible)."""
    return [tuple(r[:7]) for r in rows]


# -- checkpoints --------------------------------------------------------------------

def save_checkpoint(state: TrainState, path) -> None:
    tensors = {f"param/{k}": v for k, v in state.model.state_dict().items()}
    tensors.update({f"adam_m/{k}": v for k, v in state.adam.m.items()})
    tensors.update({f"adam_v/{k}": v for k, v in state.adam.v.items()})
    trailer = {"kind": CHECKPOINT_KIND, "version": 1, "config": state.config.to_dict(),
               "iteration": state.iteration, "rng_state": str(state.rng.state),
               "adam_step": state.adam.step, "log": [list(r) for r in state.log]}
    save_tensors(path, tensors, trailer)


def _split(tensors: dict, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix)}


def load_checkpoint(path) -> TrainState:
    """Rebuild a full training state; the returned object is fresh, so a bad
    file never leaves a half-loaded state behind."""
    tensors, trailer = load_tensors(path)
    if not trailer or trailer.get("kind") != CHECKPOINT_KIND:
        raise CheckpointFormatError(f"{path}: not a training checkpoint (missing trailer)")
    if trailer.get("version") != 1:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {trailer.get('version')}")
    cfg = TrainConfig.from_dict(trailer["config"])
    model = FreeEditor(cfg.model)
    model.load_state_dict(_split(tensors, "param/"))
    adam = AdamState(step=int(trailer["adam_step"]), m=_split(tensors, "adam_m/"), v=_split(tensors, "adam_v/"))
    rng = SplitMix64(0)
    rng.state = int(trailer["rng_state"])
    log = [tuple(r) for r in trailer.get("log", [])]
    return TrainState(cfg, model, adam, rng, int(trailer["iteration"]), log)


def load_model(path) -> FreeEditor:
    """Model parameters from either a training checkpoint or a plain tensor archive."""
    tensors, trailer = load_tensors(path)
    cfg = ModelConfig()
    if trailer and "config" in trailer:
        cfg = TrainConfig.from_dict(trailer["config"]).model
    params = _split(tensors, "param/") or tensors
    model = FreeEditor(cfg)
    model.load_state_dict(params)
    return model


# -- loop -----------------------------------------------------------------------

def train(state: TrainState, scenes: list[Scene], log_path=None, until: int | None = None,
          checkpoint_path=None, checkpoint_every: int = 0, progress=None) -> TrainState:
    """Run ``train_step`` up to iteration ``until`` (default: config iters).

    The log file is rewritten from the state's history first, so a resumed
    run produces the same file as an uninterrupted one.
    """
    cfg = state.config
    until = cfg.iters if until is None else min(until, cfg.iters)
    for scene in scenes:
        if scene.n_views < cfg.min_views():
            raise ContractError(f"scene {scene.id} has {scene.n_views} views; need {cfg.min_views()}")
    log_file = None
    if log_path is not None:
        atomic_write(log_path, ("\t".join(LOG_COLUMNS) + "\n" + format_log(state.log)).encode())
        log_file = open(log_path, "a", encoding="utf-8")
    try:
        while state.iteration < until:
            row = train_step(state, scenes)
            if log_file:
                log_file.write(format_log_row(state.log[-1]) + "\n")
                log_file.flush()
            if progress:
                progress(row)
            if checkpoint_path and checkpoint_every and state.iteration % checkpoint_every == 0:
                save_checkpoint(state, checkpoint_path)
    finally:
        if log_file:
            log_file.close()
    if checkpoint_path:
        save_checkpoint(state, checkpoint_path)
    return state


# -- inference ------------------------------------------------------------------

def render_view(model: FreeEditor, scene: Scene, edit, start_idx: int, sources, target_pose: CameraPose,
                n_points: int = 32, chunk: int = 256):
    """Render ``target_pose`` from an edited starting view and unedited sources.

    ``edit`` is an edit name (oracle-edited starting view) or an (H, W, 3)
    image already edited elsewhere. Returns the image and a per-pixel
    validity mask; invalid pixels hold the (edited) background colour.
    """
    sources = [int(s) for s in sources]
    if int(start_idx) in sources:
        raise ContractError("sources exclude starting view")
    if not sources:
        raise ContractError("at least one source view is required")
    target_pose.validate()
    if isinstance(edit, str):
        start_img = scene.edits[edit][start_idx] if edit in scene.edits else \
            apply_edit_oracle(scene.images[start_idx], edit)
        bg = scene.edited_background(edit)
    else:
        start_img = np.asarray(edit, dtype=np.float32)
        bg = scene.background
    h, w = target_pose.height, target_pose.width
    poses = [scene.poses[i] for i in sources]
    imgs = scene.images[sources]
    near, far = scene_bounds(target_pose, scene.center, scene.radius)
    jj, ii = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    px, py = ii.ravel(), jj.ravel()
    rgb = np.empty((h * w, 3), dtype=np.float32)
    valid = np.empty(h * w, dtype=bool)
    with T.no_grad():
        tokens = model.source_tokens(start_img, imgs)
        for lo in range(0, h * w, chunk):
            sl = slice(lo, min(lo + chunk, h * w))
            rays = rays_for_pixels(target_pose, px[sl], py[sl], near, far)
            depths = sample_depths(near, far, len(rays), n_points, "midpoint")
            out = model.render(tokens, imgs, poses, rays, depths)
            rgb[sl] = out.rgb.data
            valid[sl] = out.ray_valid
    rgb[~valid] = bg
    return rgb.reshape(h, w, 3), valid.reshape(h, w)
