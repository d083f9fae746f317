"""Command-line entry point: ``mapfuse <subcommand> ...``.

Exit status is 0 on success, 2 on usage errors and 1 on runtime failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from mapfuse.netcore import ABLATION_MODES, NetworkConfig


def _ints(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _modes(text: str) -> list[str]:
    modes = [s.strip() for s in text.split(",") if s.strip()]
    bad = [m for m in modes if m not in ABLATION_MODES]
    if bad or not modes:
        raise argparse.ArgumentTypeError(f"unknown modes {bad}; choose from {','.join(ABLATION_MODES)}")
    return modes


def _add_train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--eval-interval", type=int, default=0)
    p.add_argument("--voxel", type=float, default=None, help="voxel size (m) for map downsampling")
    p.add_argument("--fixed-noise", action="store_true", help="reuse each frame's fixed rough pose instead of fresh draws")
    p.add_argument("--full", action="store_true", help="full-width network (default: channels / 8, ViT depth 1)")
    p.add_argument("--mode", choices=ABLATION_MODES, default="fusion")


def _network_config(args, height: int, width: int, far_clip: float) -> NetworkConfig:
    cfg = NetworkConfig(height=height, width=width, ablation_mode=args.mode, far_clip=far_clip)
    return cfg if args.full else cfg.reduced()


def _train_config(args):
    from mapfuse.pipeline.train import TrainConfig

    return TrainConfig(
        steps=args.steps,
        batch_size=args.batch,
        lr=args.lr,
        eval_interval=args.eval_interval,
        seed=args.seed,
        resample_noise=not args.fixed_noise,
        voxel=args.voxel,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mapfuse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic benchmark")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--dynamic", type=int, default=0, help="number of moving obstacles")
    p.add_argument("--static", type=int, default=50, help="number of static boxes")
    p.add_argument("--extent", type=float, default=60.0)
    p.add_argument("--height", type=int, default=640)
    p.add_argument("--width", type=int, default=832)
    p.add_argument("--density", type=float, default=10.0, help="map points per square meter")

    p = sub.add_parser("render-depth", help="render map depth images at ground-truth or rough poses")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--frames", type=_ints, default=None)
    p.add_argument("--rough", action="store_true", help="render at the perturbed pose")
    p.add_argument("--seed", type=int, default=None, help="override the manifest noise seed")
    p.add_argument("--voxel", type=float, default=None)

    p = sub.add_parser("train", help="train a network on a benchmark")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    _add_train_args(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--split", default="eval")
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--seed", type=int, default=None, help="override the manifest noise seed")
    p.add_argument("--voxel", type=float, default=None)

    p = sub.add_parser("ablate", help="compare ViT input strategies")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--modes", type=_modes, default=list(ABLATION_MODES[:4]))
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="eval")
    _add_train_args(p)

    p = sub.add_parser("compare-dyn", help="static vs dynamic robustness of fusion and CNN-only models")
    p.add_argument("--seeds", type=_ints, default=[1, 2, 3, 4, 5])
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0, help="unused offset kept for interface symmetry")
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--dynamic", type=int, default=12)
    p.add_argument("--static", type=int, default=50)
    p.add_argument("--extent", type=float, default=60.0)
    p.add_argument("--height", type=int, default=640)
    p.add_argument("--width", type=int, default=832)
    p.add_argument("--density", type=float, default=10.0, help="map points per square meter")
    _add_train_args(p)

    p = sub.add_parser("overlay", help="project the map onto color images")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--checkpoint", type=Path, default=None, help="draw at the estimated pose (default: ground truth)")
    p.add_argument("--frames", type=_ints, default=None)
    p.add_argument("--split", default=None)
    p.add_argument("--seed", type=int, default=None, help="override the manifest noise seed")
    p.add_argument("--voxel", type=float, default=None)
    return parser


def _load(args, cache_depth=False):
    from mapfuse.pipeline.dataset import load_dataset

    ds = load_dataset(args.manifest, voxel=getattr(args, "voxel", None), cache_depth=cache_depth)
    if getattr(args, "seed", None) is not None and args.command in ("eval", "render-depth", "overlay"):
        ds.manifest.perturbation = dataclasses.replace(ds.manifest.perturbation, seed=args.seed)
    return ds


def cmd_gen_data(args) -> int:
    from mapfuse.synthworld import build_benchmark

    m = build_benchmark(
        args.seed,
        args.frames,
        args.dynamic,
        args.out,
        n_static=args.static,
        extent=args.extent,
        height=args.height,
        width=args.width,
        density=args.density,
    )
    print(f"manifest={m.root / 'manifest.cfg'} frames={args.frames} dynamic={args.dynamic}")
    return 0


def cmd_render_depth(args) -> int:
    from mapfuse.projection import save_depth_png

    ds = _load(args)
    args.out.mkdir(parents=True, exist_ok=True)
    ids = args.frames if args.frames is not None else ds.frame_ids()
    for i in ids:
        pose = ds.rough_pose(i) if args.rough else ds.poses[i]
        save_depth_png(args.out / f"{i:06d}_depth.png", ds.depth(pose, i))
    print(f"wrote {len(ids)} depth images to {args.out}")
    return 0


def cmd_train(args) -> int:
    from mapfuse.pipeline.dataset import load_dataset
    from mapfuse.pipeline.figures import plot_training_log
    from mapfuse.pipeline.train import train

    tc = _train_config(args)
    ds = load_dataset(args.manifest, voxel=tc.voxel, cache_depth=not tc.resample_noise)
    cfg = _network_config(args, *ds.resolution, ds.manifest.far_clip)
    args.out.mkdir(parents=True, exist_ok=True)
    result = train(ds, cfg, tc, args.out / "model.ckpt", args.out / "train_log.csv")
    if result.log:
        plot_training_log(result.log, args.out / "training_curve.png")
    first = result.log[0]["loss"] if result.log else float("nan")
    last = result.log[-1]["loss"] if result.log else float("nan")
    print(f"checkpoint={args.out / 'model.ckpt'} steps={tc.steps} best_step={result.best_step} loss_first={first:.6g} loss_last={last:.6g}")
    return 0


def cmd_eval(args) -> int:
    from mapfuse.netcore import load_checkpoint
    from mapfuse.pipeline.evaluate import evaluate, save_metrics
    from mapfuse.pipeline.figures import plot_error_histogram

    ds = _load(args)
    model = load_checkpoint(args.checkpoint).to_model()
    metrics = evaluate(ds, model, args.split)
    if args.out is not None:
        save_metrics(metrics, args.out)
        plot_error_histogram(metrics, args.out / "error_histogram.png", title=f"{args.split} split")
    print(metrics.to_line())
    return 0


def cmd_ablate(args) -> int:
    from mapfuse.pipeline.dataset import load_dataset
    from mapfuse.pipeline.experiments import ablate
    from mapfuse.pipeline.figures import plot_ablation

    tc = _train_config(args)
    ds = load_dataset(args.manifest, voxel=tc.voxel, cache_depth=not tc.resample_noise)
    cfg = _network_config(args, *ds.resolution, ds.manifest.far_clip)
    rows = ablate(ds, args.modes, cfg, tc, args.out, args.split)
    plot_ablation(rows, args.out / "ablation.png")
    print(f"{'mode':<18} {'mean_cm':>9} {'median_cm':>9} {'n':>5}")
    for r in rows:
        print(f"{r['mode']:<18} {r['mean_cm']:9.3f} {r['median_cm']:9.3f} {r['n']:5d}")
    return 0


def cmd_compare_dyn(args) -> int:
    from mapfuse.pipeline.experiments import BenchmarkSettings, compare_static_dynamic
    from mapfuse.pipeline.figures import plot_comparison

    tc = _train_config(args)
    cfg = _network_config(args, args.height, args.width, 100.0)
    bench = BenchmarkSettings(
        n_frames=args.frames,
        n_dynamic=args.dynamic,
        n_static=args.static,
        extent=args.extent,
        height=args.height,
        width=args.width,
        density=args.density,
    )
    report = compare_static_dynamic(args.seeds, cfg, tc, args.out, bench)
    plot_comparison(report, args.out / "compare_dyn.png")
    for line in report.lines():
        print(line)
    return 0


def cmd_overlay(args) -> int:
    from mapfuse.netcore import load_checkpoint
    from mapfuse.pipeline.evaluate import ModelPredictor, check_compatible
    from mapfuse.projection import render_overlay

    ds = _load(args)
    ids = args.frames if args.frames is not None else ds.frame_ids(args.split)
    predictor = None
    if args.checkpoint is not None:
        model = load_checkpoint(args.checkpoint).to_model()
        check_compatible(model, ds)
        predictor = ModelPredictor(model)
    args.out.mkdir(parents=True, exist_ok=True)
    for i in ids:
        sample = ds.sample(i)
        pose = predictor([sample])[0] if predictor else sample.gt
        img = render_overlay(sample.color, ds.map, pose, ds.intrinsics, ds.manifest.near_clip, ds.manifest.far_clip)
        Image.fromarray(np.asarray(img)).save(args.out / f"{i:06d}_overlay.png")
    print(f"wrote {len(ids)} overlays to {args.out}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "render-depth": cmd_render_depth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "compare-dyn": cmd_compare_dyn,
    "overlay": cmd_overlay,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001
        print(f"mapfuse {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
