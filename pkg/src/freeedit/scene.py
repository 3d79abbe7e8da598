"""Synthetic multi-view scenes, affine colour edits, view selection and the
on-disk scene layout."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraPose, read_camera, write_camera
from .ppm import PPMFormatError, quantize, read_ppm, to_float, write_ppm
from .rng import SplitMix64
from .tensor import ContractError

BACKGROUND = np.array([0.62, 0.72, 0.86])
LIGHT_DIR = np.array([0.45, 0.3, 0.84]) / np.linalg.norm([0.45, 0.3, 0.84])
AMBIENT = 0.3
DISK_RADIUS = 2.0
CHECKER_SIZE = 0.5
SCENE_CENTER = np.array([0.0, 0.0, 0.3])
SCENE_RADIUS = 2.1


@dataclass(frozen=True)
class EditSpec:
    """Per-pixel colour edit ``clip(A @ rgb + b, 0, 1)``."""

    name: str
    A: tuple
    b: tuple

    @property
    def matrix(self) -> np.ndarray:
        return np.array(self.A, dtype=np.float64)

    @property
    def bias(self) -> np.ndarray:
        return np.array(self.b, dtype=np.float64)


_LUMA = (0.299, 0.587, 0.114)
EDITS: dict[str, EditSpec] = {e.name: e for e in [
    EditSpec("identity", ((1, 0, 0), (0, 1, 0), (0, 0, 1)), (0, 0, 0)),
    EditSpec("grayscale", (_LUMA, _LUMA, _LUMA), (0, 0, 0)),
    EditSpec("sepia", ((0.393, 0.769, 0.189), (0.349, 0.686, 0.168), (0.272, 0.534, 0.131)), (0, 0, 0)),
    # channel cycle: red -> green -> blue -> red
    EditSpec("hue-rotate-120", ((0, 0, 1), (1, 0, 0), (0, 1, 0)), (0, 0, 0)),
    EditSpec("invert", ((-1, 0, 0), (0, -1, 0), (0, 0, -1)), (1, 1, 1)),
    EditSpec("warm-tint", ((1, 0, 0), (0, 0.85, 0), (0, 0, 0.6)), (0.12, 0.04, 0.0)),
]}
EDIT_NAMES = tuple(EDITS)


def get_edit(edit: str | EditSpec) -> EditSpec:
    if isinstance(edit, EditSpec):
        return edit
    try:
        return EDITS[edit]
    except KeyError:
        raise KeyError(f"unknown edit {edit!r}; available: {', '.join(EDIT_NAMES)}") from None


def apply_edit_oracle(image, edit: str | EditSpec) -> np.ndarray:
    """Apply an affine colour edit to an (..., 3) image in [0, 1]."""
    spec = get_edit(edit)
    image = np.asarray(image)
    if spec.name == "identity":
        return image.copy()
    out = image.astype(np.float64) @ spec.matrix.T + spec.bias
    return np.clip(out, 0.0, 1.0).astype(image.dtype if image.dtype.kind == "f" else np.float64)


# -- geometry and shading ------------------------------------------------------

@dataclass
class SceneGeometry:
    centers: np.ndarray   # (S, 3)
    radii: np.ndarray     # (S,)
    colors: np.ndarray    # (S, 3)
    checker: np.ndarray   # (2, 3) ground colours

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        """Closest hit along unit-direction rays.

        Returns (t, kind) with kind -1 for a miss, 0..S-1 for a sphere and S
        for the ground disk; t is inf on a miss.
        """
        n = len(origins)
        best = np.full(n, np.inf)
        kind = np.full(n, -1)
        for s, (c, r) in enumerate(zip(self.centers, self.radii)):
            oc = origins - c
            b = np.einsum("ij,ij->i", oc, dirs)
            disc = b * b - (np.einsum("ij,ij->i", oc, oc) - r * r)
            hit = disc >= 0
            t = np.where(hit, -b - np.sqrt(np.where(hit, disc, 0.0)), np.inf)
            t = np.where(t > 1e-9, t, np.inf)
            closer = t < best
            best[closer] = t[closer]
            kind[closer] = s
        with np.errstate(divide="ignore", invalid="ignore"):
            tp = np.where(dirs[:, 2] < 0, -origins[:, 2] / dirs[:, 2], np.inf)
        hitp = origins + np.where(np.isfinite(tp), tp, 0.0)[:, None] * dirs
        on_disk = np.isfinite(tp) & (tp > 1e-9) & (np.hypot(hitp[:, 0], hitp[:, 1]) <= DISK_RADIUS)
        closer = on_disk & (tp < best)
        best[closer] = tp[closer]
        kind[closer] = len(self.radii)
        return best, kind

    def shade(self, origins: np.ndarray, dirs: np.ndarray, background=BACKGROUND) -> np.ndarray:
        t, kind = self.intersect(origins, dirs)
        out = np.broadcast_to(np.asarray(background, dtype=np.float64), (len(origins), 3)).copy()
        hit = kind >= 0
        p = origins[hit] + t[hit, None] * dirs[hit]
        k = kind[hit]
        n_sph = len(self.radii)
        normal = np.zeros_like(p)
        albedo = np.zeros_like(p)
        sph = k < n_sph
        normal[sph] = (p[sph] - self.centers[k[sph]]) / self.radii[k[sph], None]
        albedo[sph] = self.colors[k[sph]]
        ground = ~sph
        normal[ground] = (0.0, 0.0, 1.0)
        cell = (np.floor(p[ground, 0] / CHECKER_SIZE) + np.floor(p[ground, 1] / CHECKER_SIZE)).astype(int) % 2
        albedo[ground] = self.checker[cell]
        lit = np.maximum(normal @ LIGHT_DIR, 0.0)
        # hard shadows cast by the spheres
        shadow_t, _ = self.intersect(p + 1e-6 * normal, np.broadcast_to(LIGHT_DIR, p.shape).copy())
        lit = np.where(np.isfinite(shadow_t), 0.0, lit)
        out[hit] = albedo * (AMBIENT + (1.0 - AMBIENT) * lit)[:, None]
        return np.clip(out, 0.0, 1.0)


def pixel_rays(pose: CameraPose, u: np.ndarray, v: np.ndarray):
    """Unit rays through continuous pixel coordinates ``(u, v)``."""
    cam = np.stack([(u - pose.cx) / pose.fx, (v - pose.cy) / pose.fy, np.ones_like(u)], axis=-1)
    dirs = cam @ pose.R
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return np.broadcast_to(pose.center, dirs.shape).copy(), dirs


def render_geometry(geometry: SceneGeometry, pose: CameraPose, supersample: int = 2,
                    background=BACKGROUND) -> np.ndarray:
    """Ray-trace an (H, W, 3) image with ``supersample``^2 rays per pixel."""
    h, w = pose.height, pose.width
    offs = (np.arange(supersample) + 0.5) / supersample
    acc = np.zeros((h * w, 3))
    jj, ii = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    for oy in offs:
        for ox in offs:
            o, d = pixel_rays(pose, (ii + ox).ravel(), (jj + oy).ravel())
            acc += geometry.shade(o, d, background)
    return (acc / supersample ** 2).reshape(h, w, 3)


def depth_map(geometry: SceneGeometry, pose: CameraPose, u, v) -> np.ndarray:
    """Distance along the ray to the first surface (inf on a miss)."""
    o, d = pixel_rays(pose, np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64))
    return geometry.intersect(o.reshape(-1, 3), d.reshape(-1, 3))[0].reshape(np.shape(u))


# -- scenes ----------------------------------------------------------------------

@dataclass
class Scene:
    id: str
    images: np.ndarray                  # (N, H, W, 3) float32, 8-bit quantised
    poses: list[CameraPose]
    center: np.ndarray
    radius: float
    edits: dict[str, np.ndarray] = field(default_factory=dict)
    background: np.ndarray = field(default_factory=lambda: BACKGROUND.copy())
    geometry: SceneGeometry | None = None

    @property
    def n_views(self) -> int:
        return len(self.poses)

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    @property
    def edit_names(self) -> list[str]:
        return list(self.edits)

    def edited(self, edit: str) -> np.ndarray:
        if edit not in self.edits:
            raise KeyError(f"scene {self.id} has no edit set {edit!r}; available: {', '.join(self.edits)}")
        return self.edits[edit]

    def edited_background(self, edit: str | None) -> np.ndarray:
        bg = self.background
        return bg if edit is None else apply_edit_oracle(bg, edit)


def camera_ring(rng: SplitMix64, n_views: int, size: int) -> list[CameraPose]:
    """Cameras on an upper hemisphere around the scene centre, jittered in azimuth."""
    poses = []
    base = rng.uniform(0.0, 2 * math.pi)
    step = 2 * math.pi / n_views
    for i in range(n_views):
        az = base + i * step + rng.uniform(-0.3, 0.3) * step
        elev = math.radians(rng.uniform(25.0, 50.0))
        dist = rng.uniform(5.0, 6.5)
        eye = SCENE_CENTER + dist * np.array([math.cos(elev) * math.cos(az),
                                              math.cos(elev) * math.sin(az), math.sin(elev)])
        f = 1.5 * size
        poses.append(CameraPose.look_at(eye, SCENE_CENTER, (0.0, 0.0, 1.0), f, f, size, size))
    return poses


def random_geometry(rng: SplitMix64) -> SceneGeometry:
    n = rng.integers(1, 4)
    radii = rng.uniform(0.3, 0.6, n)
    ang = rng.uniform(0.0, 2 * math.pi, n)
    rad = 1.1 * np.sqrt(rng.random(n))
    centers = np.stack([rad * np.cos(ang), rad * np.sin(ang), radii], axis=-1)
    colors = rng.uniform(0.15, 0.95, (n, 3))
    dark = rng.uniform(0.15, 0.35, 3)
    light = rng.uniform(0.7, 0.95, 3)
    return SceneGeometry(centers, radii, colors, np.stack([light, dark]))


def generate_synthetic_scene(seed: int, n_views: int, image_size: int, scene_id: str | None = None,
                             edits=EDIT_NAMES, min_views: int = 2) -> Scene:
    """A seeded scene of 1-3 spheres on a checkered disk, with every edit set."""
    if image_size < 32:
        raise ContractError(f"image_size must be >= 32, got {image_size}")
    if n_views < min_views:
        raise ContractError(f"need at least {min_views} views, got {n_views}")
    rng = SplitMix64(seed)
    geometry = random_geometry(rng)
    poses = camera_ring(rng, n_views, image_size)
    images = np.stack([to_float(quantize(render_geometry(geometry, p))) for p in poses])
    scene = Scene(scene_id or f"scene_{seed:04d}", images, poses, SCENE_CENTER.copy(), SCENE_RADIUS,
                  geometry=geometry)
    for name in edits:
        scene.edits[name] = to_float(quantize(apply_edit_oracle(images, name)))
    return scene


# -- view selection ---------------------------------------------------------------

def nearest_views(poses: list[CameraPose], target_idx: int, exclude=()) -> list[int]:
    """Other view indices sorted by camera-centre distance to the target (stable)."""
    skip = set(exclude) | {target_idx}
    c = poses[target_idx].center
    cand = [i for i in range(len(poses)) if i not in skip]
    dist = [float(np.linalg.norm(poses[i].center - c)) for i in cand]
    order = np.argsort(dist, kind="stable")
    return [cand[i] for i in order]


def select_views(scene: Scene | list[CameraPose], target_idx: int, rng: SplitMix64, M: int,
                 m: int | None = None, exclude=()) -> tuple[int, list[int]]:
    """Draw a starting view and M source views from the m(M+1) views nearest the target.

    ``m`` is drawn uniformly from {1, 2, 3} unless given; views in ``exclude``
    never enter the pool.
    """
    poses = scene.poses if isinstance(scene, Scene) else scene
    ranked = nearest_views(poses, target_idx, exclude)
    if M + 1 > len(ranked):
        raise ContractError(f"need {M + 1} views besides the target, only {len(ranked)} available")
    if m is None:
        m = rng.integers(1, 4)
    pool = ranked[:m * (M + 1)]
    start = pool.pop(rng.integers(0, len(pool)))
    sources = [pool[i] for i in rng.choice(len(pool), M)]
    return start, sources


def select_disjoint_sources(scene: Scene | list[CameraPose], target_idx: int, rng: SplitMix64, M: int,
                            taken, exclude=()) -> list[int]:
    """M further sources from the largest nearby pool (3(M+1) views) minus ``taken``;
    the pool grows outward when too few remain."""
    poses = scene.poses if isinstance(scene, Scene) else scene
    ranked = nearest_views(poses, target_idx, exclude)
    taken = set(taken)
    free = [i for i in ranked if i not in taken]
    if M > len(free):
        raise ContractError(f"need {M} further views, only {len(free)} available")
    pool = [i for i in ranked[:3 * (M + 1)] if i not in taken]
    if len(pool) < M:
        pool = free[:M]
    return [pool[i] for i in rng.choice(len(pool), M)]


# -- on-disk layout ---------------------------------------------------------------

def _fmt(v) -> str:
    return "%.17g" % v


def save_scene(scene: Scene, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "id": scene.id,
        "n_views": str(scene.n_views),
        "height": str(scene.height),
        "width": str(scene.width),
        "center": " ".join(_fmt(v) for v in scene.center),
        "radius": _fmt(scene.radius),
        "edits": ",".join(scene.edits),
        "background": " ".join(_fmt(v) for v in scene.background),
    }
    (d / "scene.txt").write_text("".join(f"{k} = {v}\n" for k, v in manifest.items()), encoding="utf-8")
    for i, pose in enumerate(scene.poses):
        write_camera(d / f"cam_{i:03d}.txt", pose)
        write_ppm(d / f"img_{i:03d}.ppm", scene.images[i])
    for name, imgs in scene.edits.items():
        sub = d / f"edit_{name}"
        sub.mkdir(exist_ok=True)
        for i, img in enumerate(imgs):
            write_ppm(sub / f"img_{i:03d}.ppm", img)


class ManifestError(ValueError):
    pass


def read_manifest(path) -> dict[str, str]:
    raw = Path(path).read_bytes()
    out, offset = {}, 0
    for lineno, line in enumerate(raw.decode("utf-8").splitlines(keepends=True), 1):
        text = line.strip()
        if text and not text.startswith("#"):
            if "=" not in text:
                raise ManifestError(f"{path}: line {lineno} (byte {offset}): expected 'key = value'")
            k, v = text.split("=", 1)
            out[k.strip()] = v.strip()
        offset += len(line.encode("utf-8"))
    for key in ("id", "n_views", "height", "width", "center", "radius", "edits"):
        if key not in out:
            raise ManifestError(f"{path}: missing key {key!r}")
    return out


def load_scene(directory) -> Scene:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"scene directory not found: {d}")
    man = read_manifest(d / "scene.txt")
    try:
        n, h, w = int(man["n_views"]), int(man["height"]), int(man["width"])
        center = np.array([float(v) for v in man["center"].split()])
        radius = float(man["radius"])
        bg = np.array([float(v) for v in man["background"].split()]) if "background" in man else BACKGROUND.copy()
    except ValueError as exc:
        raise ManifestError(f"{d / 'scene.txt'}: {exc}") from None
    names = [e for e in man["edits"].split(",") if e]
    poses = [read_camera(d / f"cam_{i:03d}.txt") for i in range(n)]

    def read_set(sub: Path) -> np.ndarray:
        imgs = np.stack([read_ppm(sub / f"img_{i:03d}.ppm") for i in range(n)])
        if imgs.shape[1:3] != (h, w):
            raise PPMFormatError(f"image size {imgs.shape[2]}x{imgs.shape[1]} != manifest {w}x{h}", 0, sub)
        return imgs

    scene = Scene(man["id"], read_set(d), poses, center, radius, background=bg)
    for name in names:
        scene.edits[name] = read_set(d / f"edit_{name}")
    return scene


def list_scene_dirs(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory not found: {root}")
    return sorted(p for p in root.iterdir() if (p / "scene.txt").is_file())


def is_nonempty_dir(path) -> bool:
    return os.path.isdir(path) and any(os.scandir(path))
