"""Command-line entry point: gen-data, train, render, eval, gradcheck, selftest.

Exit codes: 0 success, 1 runtime failure (message on stderr), 2 usage error.
All randomness derives from ``--seed`` (default 0).
"""

from __future__ import annotations

import argparse
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path


DEFAULT_SOURCES = 3


class CLIError(RuntimeError):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def _key_value(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="freeedit", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS threads (fallback: FE_THREADS environment variable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic scenes with every edit set")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=2)
    p.add_argument("--views", type=int, default=16)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--m-hi", type=int, default=None,
                   help="largest source count the data must support (default: training default)")
    p.add_argument("--force", action="store_true", help="write into a non-empty output directory")

    p = sub.add_parser("train", help="train a model on a scene directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--log", default=None, help="loss log path (default: <out>.log.tsv)")
    p.add_argument("--set", dest="overrides", type=_key_value, action="append", default=[],
                   metavar="KEY=VALUE", help="override a config value (repeatable)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--until", type=int, default=None, help="stop after this iteration (for resumable runs)")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("render", help="render an edited target view")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--edit", default="identity")
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sources", type=_int_list, default=None)
    p.add_argument("--start", type=int, default=None)
    p.add_argument("--start-image", default=None, help="externally edited starting view (P6)")
    p.add_argument("--n-points", type=int, default=None)
    p.add_argument("--chunk", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="edit-transfer report on held-out views")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--edits", type=_str_list, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--held-out", type=_int_list, default=None,
                   help="target views (default: the checkpoint's held-out views)")
    p.add_argument("--sources", type=int, default=DEFAULT_SOURCES)
    p.add_argument("--label", default="default", help="configuration label written in the report")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--full", action="store_true", help="include loss-function checks")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("selftest", help="quick end-to-end smoke test in a temporary directory")
    p.add_argument("--seed", type=int, default=0)
    return parser


# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .rng import SplitMix64
    from .scene import generate_synthetic_scene, is_nonempty_dir, save_scene
    from .trainer import TrainConfig

    cfg = TrainConfig()
    if args.m_hi is not None:
        cfg.m_lo = min(cfg.m_lo, args.m_hi)
        cfg.m_hi = args.m_hi
    if args.scenes <= 0:
        raise CLIError("--scenes must be positive")
    if args.views < cfg.min_views():
        raise CLIError(f"--views {args.views} is too few: sources up to M={cfg.m_hi} need "
                       f"{cfg.min_views()} views per scene (2M+2)")
    if args.size < 32:
        raise CLIError(f"--size must be >= 32, got {args.size}")
    out = Path(args.out)
    if is_nonempty_dir(out) and not args.force:
        raise CLIError(f"output directory {out} is not empty (use --force)")
    seeds = SplitMix64(args.seed)
    for i in range(args.scenes):
        scene = generate_synthetic_scene(seeds.next_u64(), args.views, args.size, scene_id=f"scene_{i:03d}")
        save_scene(scene, out / scene.id)
    print(f"wrote {args.scenes} scenes to {out}")
    return 0


def _load_scenes(data):
    from .scene import list_scene_dirs, load_scene

    dirs = list_scene_dirs(data)
    if not dirs:
        raise CLIError(f"no scenes found in {data}")
    return [load_scene(d) for d in dirs]


def cmd_train(args) -> int:
    from .trainer import (TrainConfig, apply_overrides, init_state, load_checkpoint, load_config, train)

    if not Path(args.data).is_dir():
        raise CLIError(f"data directory not found: {args.data}")
    if args.resume:
        state = load_checkpoint(args.resume)
        cfg = state.config
    else:
        cfg = load_config(args.config) if args.config else TrainConfig()
        apply_overrides(cfg, args.overrides, "--set")
        if args.seed is not None:
            cfg.seed = args.seed
        if args.iters is not None:
            cfg.iters = args.iters
        state = init_state(cfg)
    scenes = _load_scenes(args.data)
    if len(scenes) < cfg.scenes_per_batch:
        raise CLIError(f"{args.data} holds {len(scenes)} scenes; scenes_per_batch is {cfg.scenes_per_batch}")
    log_path = args.log or f"{args.out}.log.tsv"
    t0 = time.perf_counter()

    def progress(row):
        if not args.quiet and (row["iter"] % 50 == 0 or row["iter"] == cfg.iters):
            print(f"iter {row['iter']:>6}  L_tot {row['L_tot']:.5f}  L_mse {row['L_mse']:.5f}  "
                  f"{time.perf_counter() - t0:.0f}s", flush=True)

    train(state, scenes, log_path=log_path, until=args.until, checkpoint_path=args.out,
          checkpoint_every=args.checkpoint_every, progress=progress)
    print(f"checkpoint {args.out} at iteration {state.iteration}; log {log_path}")
    return 0


def cmd_render(args) -> int:
    from .ppm import read_ppm, write_ppm
    from .rng import SplitMix64
    from .scene import get_edit, load_scene, select_views
    from .trainer import load_model, render_view

    model = load_model(args.ckpt)
    scene = load_scene(args.scene)
    if not 0 <= args.target < scene.n_views:
        raise CLIError(f"--target {args.target} outside 0..{scene.n_views - 1}")
    if args.start_image is None:
        get_edit(args.edit)  # unknown edits fail here with the list of available ones
    sources, start = args.sources, args.start
    if sources is not None and start is not None and start in sources:
        raise CLIError("sources exclude starting view")
    if sources is None or start is None:
        rng = SplitMix64(args.seed)
        m = len(sources) if sources else DEFAULT_SOURCES
        pick_start, pick_sources = select_views(scene, args.target, rng, m, m=1,
                                                exclude=[start] if start is not None else ())
        start = pick_start if start is None else start
        if sources is None:
            sources = pick_sources if args.start is None else [s for s in pick_sources if s != start]
    if start in sources:
        raise CLIError("sources exclude starting view")
    edit = read_ppm(args.start_image) if args.start_image else args.edit
    n_points = args.n_points or 32
    img, valid = render_view(model, scene, edit, start, sources, scene.poses[args.target], n_points, args.chunk)
    write_ppm(args.out, img)
    print(f"rendered view {args.target} (start {start}, sources {sources}); "
          f"{int(valid.sum())}/{valid.size} valid rays -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import MetricReport, edit_psnr_report, write_report
    from .scene import EDIT_NAMES
    from .checkpoint import load_tensors
    from .trainer import TrainConfig, load_model

    model = load_model(args.ckpt)
    _, trailer = load_tensors(args.ckpt)
    held = args.held_out
    train_held = ()
    if trailer and "config" in trailer:
        train_held = tuple(TrainConfig.from_dict(trailer["config"]).held_out)
    if held is None:
        held = list(train_held)
    if not held:
        raise CLIError("no held-out views: pass --held-out or train with held_out set")
    scenes = _load_scenes(args.data)
    edits = args.edits or list(EDIT_NAMES)
    report = MetricReport(config=args.label)
    for edit in edits:
        for scene in scenes:
            rep = edit_psnr_report(model, scene, edit, held, args.sources, args.seed,
                                   exclude=set(held) | set(train_held))
            report.extend(rep.rows)
            m = rep.mean()
            print(f"{scene.id}  {edit:<15} edit-PSNR {m['psnr']:.2f}  vs unedited {m['psnr_unedited']:.2f}")
    write_report(args.out, report)
    print(f"report -> {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_results, run_checks

    t0 = time.perf_counter()
    results = run_checks(full=args.full, seed=args.seed)
    print(format_results(results))
    print(f"elapsed {time.perf_counter() - t0:.1f}s")
    return 0 if all(r.passed for r in results) else 1


def cmd_selftest(args) -> int:
    """Generate a tiny dataset, train a few steps, checkpoint, resume, render and evaluate."""
    from .metrics import read_report
    from .ppm import read_ppm
    from .trainer import parse_log, loss_columns

    tmp = Path(tempfile.mkdtemp(prefix="freeedit-selftest-"))
    try:
        data, ckpt = tmp / "data", tmp / "model.ckpt"
        sets = ["rays_per_batch=8", "model.n_epipolar=3", "n_points=8", "held_out=0", "m_lo=2", "m_hi=2",
                "warmup_iters=2", "con_start_iter=2"]
        common = ["--set=" + s for s in sets]
        steps = [
            ["gen-data", "--out", str(data), "--scenes", "2", "--views", "10", "--size", "32",
             "--seed", str(args.seed)],
            ["train", "--data", str(data), "--out", str(ckpt), "--iters", "4", "--quiet", "--seed", str(args.seed),
             *common],
            ["train", "--data", str(data), "--out", str(tmp / "half.ckpt"), "--iters", "4", "--until", "2",
             "--quiet", "--seed", str(args.seed), *common],
            ["train", "--data", str(data), "--out", str(tmp / "half.ckpt"), "--resume", str(tmp / "half.ckpt"),
             "--quiet"],
            ["render", "--ckpt", str(ckpt), "--scene", str(data / "scene_000"), "--edit", "invert",
             "--target", "0", "--out", str(tmp / "render.ppm"), "--n-points", "8"],
            ["eval", "--ckpt", str(ckpt), "--data", str(data), "--edits", "identity,invert",
             "--out", str(tmp / "report.tsv")],
        ]
        for argv in steps:
            code = main(argv)
            if code != 0:
                raise CLIError(f"selftest step failed: {' '.join(argv[:1])} exited {code}")
        straight = loss_columns(parse_log((tmp / "model.ckpt.log.tsv").read_text()))
        resumed = loss_columns(parse_log((tmp / "half.ckpt.log.tsv").read_text()))
        if straight != resumed:
            raise CLIError("resumed training log differs from the uninterrupted run")
        img = read_ppm(tmp / "render.ppm")
        if img.shape != (32, 32, 3):
            raise CLIError(f"rendered image has shape {img.shape}")
        reports = read_report(tmp / "report.tsv")
        if len(reports[0].rows) != 2 * 2:
            raise CLIError("report row count mismatch")
        print("selftest passed")
        return 0
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "render": cmd_render, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "selftest": cmd_selftest}


def _thread_limit(args):
    n = args.threads
    if n is None and os.environ.get("FE_THREADS"):
        try:
            n = int(os.environ["FE_THREADS"])
        except ValueError:
            raise CLIError(f"FE_THREADS must be an integer, got {os.environ['FE_THREADS']!r}") from None
    if n is None:
        return None
    if n <= 0:
        raise CLIError(f"--threads must be positive, got {n}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    try:
        limiter = _thread_limit(args)
        try:
            return COMMANDS[args.command](args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except Exception as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
