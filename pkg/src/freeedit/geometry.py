"""Pinhole cameras, rays, point sampling, projection and epipolar sampling.

Conventions: ``x_cam = R @ x_world + t`` with the camera looking down +z,
x to the right and y down. Continuous pixel coordinates put pixel ``(i, j)``
over ``[i, i+1) x [j, j+1)``, so its centre is at ``(i + 0.5, j + 0.5)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .rng import SplitMix64
from .tensor import ContractError, Tensor

Z_MIN = 1e-6


@dataclass
class CameraPose:
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def validate(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ContractError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ContractError("principal point outside the image")
        if np.abs(self.R.T @ self.R - np.eye(3)).max() >= 1e-6:
            raise ContractError("rotation is not orthonormal")
        if abs(np.linalg.det(self.R) - 1) >= 1e-6:
            raise ContractError("rotation determinant is not 1")

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height) -> "CameraPose":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(fx, fy, width / 2.0, height / 2.0, R, -R @ eye, width, height)


def write_camera(path, pose: CameraPose) -> None:
    lines = ["%.17g %.17g %.17g %.17g %d %d" % (pose.fx, pose.fy, pose.cx, pose.cy, pose.width, pose.height)]
    for i in range(3):
        row = list(pose.R[i]) + [pose.t[i]]
        lines.append(" ".join("%.17g" % v for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_camera(path) -> CameraPose:
    rows = [ln.split() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if len(rows) != 4 or len(rows[0]) != 6 or any(len(r) != 4 for r in rows[1:]):
        raise ValueError(f"{path}: expected 'fx fy cx cy width height' and three rows of [R | t]")
    fx, fy, cx, cy = (float(v) for v in rows[0][:4])
    width, height = int(rows[0][4]), int(rows[0][5])
    mat = np.array([[float(v) for v in r] for r in rows[1:]])
    return CameraPose(fx, fy, cx, cy, mat[:, :3], mat[:, 3], width, height)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float


@dataclass
class RayBatch:
    """Rays stored as (N, 3) origin / direction arrays sharing near and far."""

    origins: np.ndarray
    directions: np.ndarray
    near: float
    far: float

    def __len__(self) -> int:
        return len(self.origins)


@dataclass
class PointSamples:
    depths: np.ndarray   # (..., P) ascending
    points: np.ndarray   # (..., P, 3)
    deltas: np.ndarray   # (..., P)


def rays_for_pixels(pose: CameraPose, px, py, near: float = 0.1, far: float = 10.0) -> RayBatch:
    """World-space rays through the centres of pixels ``(px, py)``."""
    px = np.asarray(px, dtype=np.float64).reshape(-1)
    py = np.asarray(py, dtype=np.float64).reshape(-1)
    if np.any((px < 0) | (px >= pose.width) | (py < 0) | (py >= pose.height)):
        raise IndexError(f"pixel outside the {pose.width}x{pose.height} image")
    cam = np.stack([(px + 0.5 - pose.cx) / pose.fx,
                    (py + 0.5 - pose.cy) / pose.fy,
                    np.ones_like(px)], axis=-1)
    dirs = cam @ pose.R  # R^T applied to row vectors
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.center, dirs.shape).copy()
    return RayBatch(origins, dirs, near, far)


def ray_for_pixel(pose: CameraPose, px: float, py: float, near: float = 0.1, far: float = 10.0) -> Ray:
    batch = rays_for_pixels(pose, [px], [py], near, far)
    return Ray(batch.origins[0], batch.directions[0], near, far)


def sample_depths(near: float, far: float, n_rays: int, n_points: int, mode: str = "midpoint",
                  rng: SplitMix64 | None = None) -> np.ndarray:
    """(n_rays, n_points) depths, one per equal bin of [near, far]."""
    if n_points < 2:
        raise ContractError(f"need at least 2 samples per ray, got {n_points}")
    width = (far - near) / n_points
    lower = near + width * np.arange(n_points)
    if mode == "midpoint":
        jitter = np.full((n_rays, n_points), 0.5)
    elif mode == "stratified":
        if rng is None:
            raise ContractError("stratified sampling needs an rng")
        jitter = rng.random((n_rays, n_points))
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return lower + width * jitter


def sample_points(rays: RayBatch | Ray, n_points: int, mode: str = "midpoint",
                  rng: SplitMix64 | None = None, depths: np.ndarray | None = None) -> PointSamples:
    single = isinstance(rays, Ray)
    origins = np.atleast_2d(rays.origin if single else rays.origins)
    dirs = np.atleast_2d(rays.direction if single else rays.directions)
    if depths is None:
        depths = sample_depths(rays.near, rays.far, len(origins), n_points, mode, rng)
    points = origins[:, None, :] + depths[..., None] * dirs[:, None, :]
    deltas = np.concatenate([np.diff(depths, axis=-1), rays.far - depths[:, -1:]], axis=-1)
    if single:
        return PointSamples(depths[0], points[0], deltas[0])
    return PointSamples(depths, points, deltas)


def project_points(points: np.ndarray, pose: CameraPose):
    """Project (..., 3) world points.

    Returns ``(uv, z, valid)``: pixel coordinates (..., 2), camera depth (...)
    and a flag that is False behind the camera or outside the image.
    """
    pts = np.asarray(points, dtype=np.float64)
    xc = pts @ pose.R.T + pose.t
    z = xc[..., 2]
    zs = np.where(z > Z_MIN, z, 1.0)
    u = pose.fx * xc[..., 0] / zs + pose.cx
    v = pose.fy * xc[..., 1] / zs + pose.cy
    valid = (z > Z_MIN) & (u >= 0) & (u < pose.width) & (v >= 0) & (v < pose.height)
    return np.stack([u, v], axis=-1), z, valid


def project(point, pose: CameraPose):
    """Pixel coordinates and depth ``(u, v, z)`` of one point, or None when out of view."""
    uv, z, valid = project_points(np.asarray(point, dtype=np.float64)[None], pose)
    if not valid[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1]), float(z[0])


def epipolar_directions(points: np.ndarray, dirs: np.ndarray, pose: CameraPose) -> np.ndarray:
    """Unit image-space direction of the epipolar line at each projected point.

    This is the derivative of the projection of ``x + s * d`` with respect to
    ``s``; the projection of a 3-D line is a 2-D line, so the tangent at one
    point is the direction of the whole line. Degenerate cases (ray through
    the source centre) fall back to (1, 0).
    """
    xc = points @ pose.R.T + pose.t
    dc = dirs @ pose.R.T
    z = xc[..., 2]
    zs = np.where(np.abs(z) > Z_MIN, z, Z_MIN)
    du = pose.fx * (dc[..., 0] * zs - xc[..., 0] * dc[..., 2]) / (zs * zs)
    dv = pose.fy * (dc[..., 1] * zs - xc[..., 1] * dc[..., 2]) / (zs * zs)
    vec = np.stack([du, dv], axis=-1)
    n = np.linalg.norm(vec, axis=-1, keepdims=True)
    fallback = np.broadcast_to(np.array([1.0, 0.0]), vec.shape)
    return np.where(n > 1e-12, vec / np.where(n > 1e-12, n, 1.0), fallback)


def epipolar_samples(points: np.ndarray, dirs: np.ndarray, pose: CameraPose, n_samples: int,
                     window_px: float):
    """Equally spaced samples on each point's epipolar line in ``pose``'s image.

    points: (..., 3) target-ray points; dirs: matching (..., 3) ray directions.
    Returns ``(uv, valid, offsets)`` with uv (..., n_samples, 2), valid
    (..., n_samples) and the signed offsets (n_samples,) in pixels. If the
    centre projection is out of view every sample of that point is invalid.
    """
    if n_samples < 1 or n_samples % 2 == 0:
        raise ContractError(f"n_samples must be odd and >= 1, got {n_samples}")
    if window_px <= 0:
        raise ContractError(f"window must be positive, got {window_px}")
    points = np.asarray(points, dtype=np.float64)
    dirs = np.broadcast_to(np.asarray(dirs, dtype=np.float64), points.shape)
    center, _, center_ok = project_points(points, pose)
    line = epipolar_directions(points, dirs, pose)
    offsets = np.linspace(-window_px, window_px, n_samples) if n_samples > 1 else np.zeros(1)
    uv = center[..., None, :] + offsets[:, None] * line[..., None, :]
    inside = ((uv[..., 0] >= 0) & (uv[..., 0] < pose.width)
              & (uv[..., 1] >= 0) & (uv[..., 1] < pose.height))
    valid = inside & center_ok[..., None]
    return uv, valid, offsets


def bilinear_taps(height: int, width: int, u, v):
    """Neighbour indices and weights for bilinear interpolation in map units.

    Node (row i, col j) sits at (u=j, v=i); coordinates are clamped to the map.
    Returns flat indices (..., 4) into a row-major (height*width) grid and
    matching weights (..., 4).
    """
    u = np.clip(np.asarray(u, dtype=np.float64), 0, width - 1)
    v = np.clip(np.asarray(v, dtype=np.float64), 0, height - 1)
    j0 = np.minimum(np.floor(u).astype(np.int64), max(width - 2, 0))
    i0 = np.minimum(np.floor(v).astype(np.int64), max(height - 2, 0))
    j1 = np.minimum(j0 + 1, width - 1)
    i1 = np.minimum(i0 + 1, height - 1)
    fu = u - j0
    fv = v - i0
    idx = np.stack([i0 * width + j0, i0 * width + j1, i1 * width + j0, i1 * width + j1], axis=-1)
    w = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=-1)
    return idx, w


def bilinear_matrix(height: int, width: int, u, v) -> np.ndarray:
    """Dense (n, height*width) interpolation matrix for flattened query points."""
    idx, w = bilinear_taps(height, width, np.ravel(u), np.ravel(v))
    mat = np.zeros((idx.shape[0], height * width))
    rows = np.repeat(np.arange(idx.shape[0]), 4)
    np.add.at(mat, (rows, idx.reshape(-1)), w.reshape(-1))
    return mat


def bilinear_sample(fmap, u, v) -> Tensor:
    """Bilinearly sample a (H, W, C) map at continuous map coordinates.

    Differentiable with respect to the map values; ``u``/``v`` may be arrays,
    giving a (..., C) result.
    """
    fmap = fmap if isinstance(fmap, Tensor) else Tensor(fmap)
    h, w, c = fmap.shape
    if h == 0 or w == 0:
        raise ContractError("cannot sample an empty map")
    idx, wts = bilinear_taps(h, w, u, v)
    flat = fmap.reshape(h * w, c)
    out = None
    for k in range(4):
        term = flat[idx[..., k]] * Tensor(wts[..., k, None])
        out = term if out is None else out + term
    return out


def sample_image(img: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear colour lookup at continuous pixel coordinates (centres at +0.5)."""
    h, w = img.shape[:2]
    idx, wts = bilinear_taps(h, w, uv[..., 0] - 0.5, uv[..., 1] - 0.5)
    flat = img.reshape(h * w, -1)
    return np.einsum("...k,...kc->...c", wts, flat[idx])


def fourier_encode(x, n_freqs: int = 10) -> np.ndarray:
    """[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)].

    The trailing axis holds the k components; the output has k * (1 + 2L)
    entries: the raw values, then per frequency k sines followed by k cosines.
    """
    x = np.asarray(x, dtype=np.float64)
    parts = [x]
    for j in range(n_freqs):
        arg = (2.0 ** j) * math.pi * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1).astype(T.default_dtype())


def scene_bounds(pose: CameraPose, center, radius: float) -> tuple[float, float]:
    """Near/far planes enclosing a bounding sphere as seen from ``pose``."""
    dist = float(np.linalg.norm(pose.center - np.asarray(center, dtype=np.float64)))
    return max(0.05, dist - radius * 1.1), dist + radius * 1.1
