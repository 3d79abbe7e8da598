"""Desk-scale experiments: overfit, edit transfer and the loss ablation.

Training runs are cached as checkpoints keyed by the full training config, the
scene recipe and a hash of this package's source, so a re-run only re-renders
and re-scores. Run ``python -m freeedit.experiments all`` to fill the cache.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from .checkpoint import CheckpointFormatError
from .metrics import MetricReport, edit_psnr_report, format_report
from .scene import EDIT_NAMES, Scene, generate_synthetic_scene
from .trainer import TrainConfig, TrainState, init_state, load_checkpoint, train

SCENE_SEEDS = (0, 1)
N_VIEWS = 16
IMAGE_SIZE = 48
HELD_OUT = (3, 11)
N_SOURCES = 3
OVERFIT_SEEDS = (0, 1, 2)
PSNR_BAR = 22.0
MARGIN_BAR = 3.0
WALLCLOCK_BAR_S = 30 * 60

# Shared by every experiment; chosen so a 2000-iteration run fits the time budget.
BASE_SETTINGS = dict(iters=2000, rays_per_batch=64, scenes_per_batch=2, m_lo=3, m_hi=3, n_points=32,
                     lr_edit=6e-4, lr_epipolar=3e-4, lr_ray=1.5e-3, lr_encoder=3e-4, warmup_iters=50)
MODEL_SETTINGS = dict(n_epipolar=1, sample_rgb=True)


def default_cache_dir() -> Path:
    env = os.environ.get("FE_ACCEPTANCE_CACHE")
    return Path(env) if env else Path(__file__).resolve().parents[2] / ".acceptance-cache"


def experiment_scenes() -> list[Scene]:
    return [generate_synthetic_scene(s, N_VIEWS, IMAGE_SIZE) for s in SCENE_SEEDS]


def make_config(seed: int = 0, edits=EDIT_NAMES, **overrides) -> TrainConfig:
    cfg = TrainConfig(seed=seed, edits=tuple(edits), held_out=HELD_OUT)
    for k, v in {**BASE_SETTINGS, **overrides}.items():
        setattr(cfg, k, v)
    for k, v in MODEL_SETTINGS.items():
        setattr(cfg.model, k, v)
    return cfg


def overfit_config(seed: int) -> TrainConfig:
    return make_config(seed, edits=("identity",))


ABLATIONS = {"full": {}, "no_self": {"lambda_s": 0.0}, "no_consistency": {"lambda_c": 0.0}}


def edit_config(label: str = "full") -> TrainConfig:
    return make_config(0, **ABLATIONS[label])


def source_hash() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).resolve().parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def cache_key(cfg: TrainConfig) -> str:
    recipe = {"config": cfg.to_dict(), "scenes": [SCENE_SEEDS, N_VIEWS, IMAGE_SIZE], "source": source_hash()}
    return hashlib.sha256(json.dumps(recipe, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunResult:
    config: TrainConfig
    state: TrainState
    path: Path
    cached: bool

    @property
    def train_seconds(self) -> float:
        return sum(row[-1] for row in self.state.log) / 1000.0


def run_cached(cfg: TrainConfig, scenes: list[Scene] | None = None, cache_dir=None, progress=None) -> RunResult:
    """Train ``cfg`` to completion unless a finished checkpoint for it is cached."""
    cache = Path(cache_dir) if cache_dir else default_cache_dir()
    cache.mkdir(parents=True, exist_ok=True)
    path = cache / f"{cache_key(cfg)}.ckpt"
    state = None
    if path.exists():  # finished, or interrupted and resumed from here
        try:
            state = load_checkpoint(path)
        except CheckpointFormatError:
            state = None
    if state is not None and state.iteration >= cfg.iters:
        return RunResult(cfg, state, path, True)
    state = state or init_state(cfg)
    scenes = scenes if scenes is not None else experiment_scenes()
    train(state, scenes, log_path=path.with_suffix(".log.tsv"), checkpoint_path=path, checkpoint_every=100,
          progress=progress)
    return RunResult(cfg, state, path, False)


def held_out_report(result: RunResult, scenes: list[Scene], edits, label: str) -> MetricReport:
    report = MetricReport(config=label)
    for edit in edits:
        for scene in scenes:
            report.extend(edit_psnr_report(result.state.model, scene, edit, HELD_OUT, N_SOURCES,
                                           exclude=HELD_OUT).rows)
    return report


# -- the three experiments -------------------------------------------------------

def overfit(cache_dir=None, progress=None) -> dict:
    scenes = experiment_scenes()
    per_seed = {}
    for seed in OVERFIT_SEEDS:
        res = run_cached(overfit_config(seed), scenes, cache_dir, progress)
        rep = held_out_report(res, scenes, ["identity"], f"seed{seed}")
        per_seed[seed] = {"psnr": rep.mean("identity")["psnr"], "train_seconds": res.train_seconds,
                          "report": rep}
    best = max(per_seed, key=lambda s: per_seed[s]["psnr"])
    return {"per_seed": per_seed, "best_seed": best, "best_psnr": per_seed[best]["psnr"],
            "best_train_seconds": per_seed[best]["train_seconds"]}


def edit_transfer(label: str = "full", cache_dir=None, progress=None) -> MetricReport:
    scenes = experiment_scenes()
    res = run_cached(edit_config(label), scenes, cache_dir, progress)
    return held_out_report(res, scenes, EDIT_NAMES, label)


def edit_margins(report: MetricReport) -> dict[str, float]:
    """Mean Edit-PSNR minus mean PSNR against the unedited views, per non-identity edit."""
    out = {}
    for edit in report.edits():
        if edit != "identity":
            m = report.mean(edit)
            out[edit] = m["psnr"] - m["psnr_unedited"]
    return out


def ablation(cache_dir=None, progress=None) -> list[MetricReport]:
    return [edit_transfer(label, cache_dir, progress) for label in ABLATIONS]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="python -m freeedit.experiments", description=__doc__.splitlines()[0])
    parser.add_argument("which", choices=["overfit", "edit", "ablation", "all"])
    parser.add_argument("--cache", default=None, help="checkpoint cache directory")
    parser.add_argument("--report", default=None, help="write the metric report here")
    args = parser.parse_args(argv)
    t0 = time.perf_counter()

    def progress(row):
        if row["iter"] % 100 == 0:
            print(f"iter {row['iter']:>5}  L_mse {row['L_mse']:.4f}  {time.perf_counter() - t0:.0f}s", flush=True)

    reports = []
    if args.which in ("overfit", "all"):
        res = overfit(args.cache, progress)
        for seed, r in res["per_seed"].items():
            print(f"overfit seed {seed}: held-out PSNR {r['psnr']:.2f} dB, training {r['train_seconds']:.0f}s")
            reports.append(r["report"])
    if args.which in ("edit", "ablation", "all"):
        labels = ["full"] if args.which == "edit" else list(ABLATIONS)
        for label in labels:
            rep = edit_transfer(label, args.cache, progress)
            margins = edit_margins(rep)
            print(label, " ".join(f"{k}={v:+.2f}" for k, v in margins.items()))
            reports.append(rep)
    text = format_report(reports)
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
