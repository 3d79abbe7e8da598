"""Image-quality metrics (PSNR, SSIM) and the edit-transfer report."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .checkpoint import atomic_write
from .tensor import ContractError, ShapeError

PSNR_CAP = 99.0
LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def psnr(a, b, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _luma(img: np.ndarray) -> np.ndarray:
    return img @ LUMA if img.ndim == 3 else img


def ssim(a, b, data_range: float = 1.0) -> float:
    """Single-scale SSIM on luma with an 11x11 Gaussian window over valid positions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    x, y = _luma(a), _luma(b)
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise ContractError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    win = gaussian_window()

    def filt(img):
        return np.einsum("ijkl,kl->ij", sliding_window_view(img, win.shape), win)

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


@dataclass
class ViewMetrics:
    scene: str
    edit: str
    view: int
    psnr: float
    ssim: float
    psnr_unedited: float
    ssim_unedited: float

    @property
    def margin(self) -> float:
        return self.psnr - self.psnr_unedited


METRIC_FIELDS = ("psnr", "ssim", "psnr_unedited", "ssim_unedited")
REPORT_HEADER = ("config", "scene", "edit", "view") + METRIC_FIELDS


@dataclass
class MetricReport:
    rows: list[ViewMetrics] = field(default_factory=list)
    config: str = "default"

    def extend(self, rows) -> None:
        self.rows.extend(rows)

    def edits(self) -> list[str]:
        return list(dict.fromkeys(r.edit for r in self.rows))

    def scenes(self) -> list[str]:
        return list(dict.fromkeys(r.scene for r in self.rows))

    def select(self, edit: str | None = None, scene: str | None = None) -> list[ViewMetrics]:
        return [r for r in self.rows if (edit is None or r.edit == edit) and (scene is None or r.scene == scene)]

    def mean(self, edit: str | None = None, scene: str | None = None) -> dict[str, float]:
        rows = self.select(edit, scene)
        if not rows:
            raise KeyError(f"no rows for edit={edit!r} scene={scene!r}")
        return {f: float(np.mean([getattr(r, f) for r in rows])) for f in METRIC_FIELDS}


def _fmt(v: float) -> str:
    return repr(float(v))


def report_lines(report: MetricReport) -> list[list[str]]:
    lines = []
    for r in report.rows:
        lines.append([report.config, r.scene, r.edit, str(r.view)] + [_fmt(getattr(r, f)) for f in METRIC_FIELDS])
    for edit in report.edits():
        for scene in report.scenes():
            if report.select(edit, scene):
                m = report.mean(edit, scene)
                lines.append([report.config, scene, edit, "MEAN"] + [_fmt(m[f]) for f in METRIC_FIELDS])
    for edit in report.edits():
        m = report.mean(edit)
        lines.append([report.config, "ALL", edit, "MEAN"] + [_fmt(m[f]) for f in METRIC_FIELDS])
    return lines


def format_report(reports: list[MetricReport] | MetricReport) -> str:
    """Tab-separated report: header, per-view rows, then MEAN rows (per scene and over all scenes)."""
    if isinstance(reports, MetricReport):
        reports = [reports]
    out = ["\t".join(REPORT_HEADER)]
    for rep in reports:
        out.extend("\t".join(line) for line in report_lines(rep))
    return "\n".join(out) + "\n"


def write_report(path, reports) -> None:
    atomic_write(path, format_report(reports).encode("utf-8"))


def parse_report(text: str) -> list[MetricReport]:
    """Inverse of :func:`format_report`; MEAN rows are recomputed, not stored."""
    reader = csv.reader(text.splitlines(), delimiter="\t")
    header = next(reader, None)
    if tuple(header or ()) != REPORT_HEADER:
        raise ValueError(f"unexpected report header: {header}")
    reports: dict[str, MetricReport] = {}
    for lineno, row in enumerate(reader, 2):
        if len(row) != len(REPORT_HEADER):
            raise ValueError(f"report line {lineno}: expected {len(REPORT_HEADER)} fields, got {len(row)}")
        config, scene, edit, view = row[:4]
        rep = reports.setdefault(config, MetricReport(config=config))
        if view == "MEAN":
            continue
        vals = [float(v) for v in row[4:]]
        rep.rows.append(ViewMetrics(scene, edit, int(view), *vals))
    return list(reports.values())


def read_report(path) -> list[MetricReport]:
    return parse_report(Path(path).read_text(encoding="utf-8"))


def edit_psnr_report(model, scene, edit: str, targets, n_sources: int = 3, seed: int = 0,
                     exclude=(), n_points: int = 32, chunk: int = 256) -> MetricReport:
    """Render each target from the edited starting view and compare against the
    oracle-edited and the unedited ground truth."""
    from .scene import SplitMix64, select_views
    from .trainer import render_view

    edited = scene.edited(edit)
    rows = []
    for t in targets:
        rng = SplitMix64(seed * 1_000_003 + int(t))
        start, sources = select_views(scene, t, rng, n_sources, m=1, exclude=set(exclude) - {t})
        img, _ = render_view(model, scene, edit, start, sources, scene.poses[t], n_points, chunk)
        rows.append(ViewMetrics(scene.id, edit, int(t),
                                psnr(img, edited[t]), ssim(img, edited[t]),
                                psnr(img, scene.images[t]), ssim(img, scene.images[t])))
    return MetricReport(rows)
