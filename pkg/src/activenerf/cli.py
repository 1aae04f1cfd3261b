"""Command line entry point: ``activenerf <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import types
import typing
from dataclasses import MISSING, fields
from pathlib import Path

import numpy as np

from . import bayes
from .experiment import ExperimentConfig, load_config, load_transforms, run_experiment
from .field import load_checkpoint
from .image_io import read_png, write_png, write_variance_map
from .metrics import psnr, read_report, ssim
from .render import render_image
from .scene import default_scene, generate_dataset, load_scene, random_scene, sample_sphere_views, save_scene
from .training import TrainConfig, init_train_state, save_train_state, train_loop


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _field_type(tp):
    args = [a for a in typing.get_args(tp) if a is not type(None)]
    if isinstance(tp, types.UnionType) or typing.get_origin(tp) is typing.Union:
        tp = args[0]
    if tp is bool:
        return _parse_bool, None
    if typing.get_origin(tp) is tuple:
        return float, len(typing.get_args(tp))
    return tp, None


def _add_dataclass_flags(parser: argparse.ArgumentParser, cls, skip=()) -> None:
    """One optional flag per dataclass field; unset flags stay ``None``."""
    hints = typing.get_type_hints(cls)
    for f in fields(cls):
        if f.name in skip:
            continue
        conv, nargs = _field_type(hints[f.name])
        default = f.default if f.default is not MISSING else None
        parser.add_argument(_flag(f.name), dest=f.name, type=conv, nargs=nargs, default=None,
                            help=f"(default: {default})")


def _overrides(args: argparse.Namespace, cls) -> dict:
    out = {}
    for f in fields(cls):
        value = getattr(args, f.name, None)
        if value is not None:
            out[f.name] = tuple(value) if isinstance(value, list) else value
    return out


def _train_config(args: argparse.Namespace, base: dict | None = None) -> TrainConfig:
    preset = getattr(args, "preset", "quick")
    start = {"quick": TrainConfig.quick, "default": TrainConfig, "paper": TrainConfig.paper}[preset]()
    merged = {**start.to_dict(), **(base or {}), **_overrides(args, TrainConfig)}
    return TrainConfig.from_dict(merged)


def _views(args, scene_radius: float):
    reach = scene_radius * 1.05
    return sample_sphere_views(args.views, args.radius, hemisphere=args.hemisphere, seed=args.seed,
                               width=args.image_width, height=args.image_height, fov_degrees=args.fov,
                               t_near=args.radius - reach, t_far=args.radius + reach)


def _add_view_flags(p: argparse.ArgumentParser, views: int) -> None:
    p.add_argument("--views", type=int, default=views, help="number of Fibonacci-lattice cameras")
    p.add_argument("--radius", type=float, default=3.5, help="camera distance from the origin")
    p.add_argument("--hemisphere", action="store_true", help="upper hemisphere only")
    p.add_argument("--image-width", type=int, default=64)
    p.add_argument("--image-height", type=int, default=64)
    p.add_argument("--fov", type=float, default=40.0, help="horizontal field of view in degrees")


def _load_models(path: str):
    ckpt = load_checkpoint(path)
    if "coarse" not in ckpt.networks or "fine" not in ckpt.networks:
        raise SystemExit(f"{path}: checkpoint lacks coarse/fine networks")
    tcfg = TrainConfig.from_dict(ckpt.extra["train"]) if "train" in ckpt.extra else TrainConfig()
    return ckpt.networks["coarse"], ckpt.networks["fine"], tcfg


def _scene(path: str | None):
    return load_scene(path) if path else default_scene()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_scene(args) -> int:
    scene = random_scene(args.seed, args.primitives) if args.random else default_scene()
    save_scene(scene, args.out)
    print(f"wrote {args.out} ({len(scene.primitives)} primitives)")
    return 0


def cmd_train(args) -> int:
    tcfg = _train_config(args)
    tcfg = tcfg.with_(seed=args.seed, total_steps=args.steps if args.steps is not None else tcfg.total_steps)
    if args.transforms:
        images = load_transforms(args.transforms)
    else:
        scene = _scene(args.scene)
        images = generate_dataset(scene, _views(args, scene.bounding_radius), args.oracle_steps)
    state = init_train_state(tcfg, images)
    train_loop(state, None, tcfg, log_every=args.log_every, log_path=args.log)
    save_train_state(state, args.out, {"train": tcfg.to_dict()})
    print(f"trained {state.step} steps on {len(images)} views, final loss {state.last_loss:.5f}; wrote {args.out}")
    return 0


def cmd_init(args) -> int:
    tcfg = _train_config(args).with_(seed=args.seed)
    state = init_train_state(tcfg)
    save_train_state(state, args.out, {"train": tcfg.to_dict()})
    print(f"wrote untrained checkpoint {args.out}")
    return 0


def cmd_select(args) -> int:
    coarse, fine, tcfg = _load_models(args.checkpoint)
    if not fine.uncertainty:
        raise SystemExit("select needs a checkpoint trained with uncertainty")
    scene = _scene(args.scene)
    cands = _views(args, scene.bounding_radius)
    results = bayes.score_candidates(coarse, fine, cands, args.stride, tcfg.render_config(perturb=False),
                                     workers=args.workers)
    ranked = bayes.rank_topk(results, len(results))
    top = {vid for vid, _ in ranked[:args.k]}
    by_id = {r.view_id: r for r in results}
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["rank", "view_id", "score", "rays_evaluated", "selected"])
    for rank, (vid, score) in enumerate(ranked):
        w.writerow([rank, vid, f"{score:.8g}", by_id[vid].rays_evaluated, int(vid in top)])
    return 0


def cmd_render(args) -> int:
    coarse, fine, tcfg = _load_models(args.checkpoint)
    scene = _scene(args.scene)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rcfg = tcfg.render_config(perturb=False)
    for k, pose in enumerate(_views(args, scene.bounding_radius)):
        img = render_image(coarse, fine, pose, rcfg)
        write_png(out_dir / f"view_{k:03d}.png", img.rgb)
        if img.variance_map is not None:
            write_variance_map(out_dir / f"view_{k:03d}_variance", img.variance_map)
    print(f"wrote {args.views} renders to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    if args.image and args.reference:
        a, b = read_png(args.image), read_png(args.reference)
        print(f"psnr {psnr(a, b):.4f}\nssim {ssim(a, b):.6f}")
        return 0
    if not args.checkpoint:
        raise SystemExit("eval needs --image and --reference, or --checkpoint")
    coarse, fine, tcfg = _load_models(args.checkpoint)
    scene = _scene(args.scene)
    poses = _views(args, scene.bounding_radius)
    gts = generate_dataset(scene, poses, args.oracle_steps)
    rcfg = tcfg.render_config(perturb=False)
    ps, ss = [], []
    for gt in gts:
        rgb = np.clip(render_image(coarse, fine, gt.pose, rcfg).rgb, 0.0, 1.0)
        ps.append(psnr(rgb, gt.pixels))
        ss.append(ssim(rgb, gt.pixels))
    print(f"views {len(gts)}\npsnr {np.mean(ps):.4f}\nssim {np.mean(ss):.6f}")
    return 0


def cmd_report(args) -> int:
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["run", "round", "n_train_views", "psnr", "ssim", "mean_variance", "wall_time_s"])
    for run in args.run_dirs:
        run = Path(run)
        path = run / "timings.csv" if (run / "timings.csv").exists() else run / "metrics.csv"
        for r in read_report(path):
            w.writerow([run.name, r.round, r.n_train_views, f"{r.psnr:.4f}", f"{r.ssim:.4f}",
                        f"{r.mean_variance:.6g}", f"{r.wall_time_s:.2f}"])
    print("# LPIPS is not reported (it needs a pretrained perceptual network)")
    return 0


def cmd_run(args) -> int:
    data = load_config(args.config) if args.config else {}
    train_data = dict(data.pop("train", None) or {})
    train_keys = {f.name for f in fields(TrainConfig)}
    for key in [k for k in data if k in train_keys and k != "seed"]:
        train_data[key] = data.pop(key)
    exp = {**data, **_overrides(args, ExperimentConfig)}
    exp["seed"] = args.seed
    exp["train"] = _train_config(args, train_data).with_(seed=args.seed).to_dict()
    cfg = ExperimentConfig.from_dict(exp)
    result = run_experiment(cfg, args.out)
    last = result.records[-1]
    print(f"{cfg.mode} seed {cfg.seed}: final psnr {last.psnr:.3f} ssim {last.ssim:.4f} "
          f"after {last.n_train_views} views; run directory {result.run_dir}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="activenerf", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="write a scene description file")
    p.add_argument("--out", required=True)
    p.add_argument("--random", action="store_true", help="random primitives instead of the default scene")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--primitives", type=int, default=5)
    p.set_defaults(func=cmd_gen_scene)

    def train_flags(p):
        p.add_argument("--preset", choices=("quick", "default", "paper"), default="quick")
        _add_dataclass_flags(p, TrainConfig, skip=("seed",))

    p = sub.add_parser("train", help="train on oracle renders (or a transforms file) and write a checkpoint")
    p.add_argument("--scene")
    p.add_argument("--transforms")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--oracle-steps", type=int, default=192)
    p.add_argument("--log")
    p.add_argument("--log-every", type=int, default=100)
    _add_view_flags(p, 10)
    train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("init", help="write an untrained checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    train_flags(p)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("select", help="score candidate views and print the ranking")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene")
    p.add_argument("--seed", type=int, default=0, help="candidate lattice rotation")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--workers", type=int, default=1)
    _add_view_flags(p, 100)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("render", help="render RGB and uncertainty maps from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_view_flags(p, 4)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM of two images, or of a checkpoint against oracle renders")
    p.add_argument("--image")
    p.add_argument("--reference")
    p.add_argument("--checkpoint")
    p.add_argument("--scene")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--oracle-steps", type=int, default=192)
    _add_view_flags(p, 8)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="print the per-round metrics of one or more run directories")
    p.add_argument("run_dirs", nargs="+")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="run a full active-learning experiment")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    _add_dataclass_flags(p, ExperimentConfig, skip=("seed", "train"))
    train_flags(p)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
