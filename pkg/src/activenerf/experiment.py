"""Active-learning experiments: train, score candidates, capture, update, repeat.

A run directory holds::

    config.yaml        full experiment config (with the training config nested)
    scene.yaml         scene snapshot
    metrics.csv        round, n_train_views, psnr, ssim, mean_variance
    timings.csv        the same rows plus wall_time_s
    acquisition.csv    every scored (or baseline-picked) candidate per round
    selected.csv       captured view ids per round
    train_log.csv      periodic training loss
    summary.json       optimizer step counters and final metrics
    checkpoints/       round_XX.ckpt (and cache_XX.bin in BE mode)
    renders/           final eval renders and uncertainty maps
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import yaml

from . import bayes
from .image_io import read_png, write_png, write_variance_map
from .metrics import DETERMINISTIC_COLUMNS, REPORT_COLUMNS, MetricRecord, psnr, ssim, write_report
from .render import derive_seed, render_image
from .scene import CameraPose, PosedImage, Scene, default_scene, load_scene, oracle_render, \
    sample_sphere_views, save_scene
from .training import TrainConfig, TrainState, continuous_update, init_train_state, save_train_state, train_loop

log = logging.getLogger(__name__)

MODES = ("activenerf-cl", "activenerf-be", "nerf-random", "nerf-fvs", "static")
UNCERTAINTY_MODES = ("activenerf-cl", "activenerf-be")


@dataclass
class ExperimentConfig:
    mode: str = "activenerf-cl"
    seed: int = 0
    scene: str | None = None
    transforms: str | None = None
    n_initial_views: int = 2
    k_per_round: int = 2
    rounds: int = 4
    steps_per_round: int = 5000
    initial_steps: int | None = None
    candidate_count: int = 100
    stride: int = 4
    eval_view_count: int = 8
    image_width: int = 64
    image_height: int = 64
    fov_degrees: float = 40.0
    camera_radius: float = 3.5
    hemisphere: bool = False
    oracle_steps: int = 192
    cell_size: float | None = None
    log_every: int = 100
    workers: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.rounds > 0 and self.k_per_round < 1 and self.mode != "static":
            raise ValueError("k_per_round must be >= 1 when rounds > 0")
        if self.n_initial_views < 1:
            raise ValueError("n_initial_views must be >= 1")
        if self.steps_per_round < 0 or (self.initial_steps is not None and self.initial_steps < 0):
            raise ValueError("step counts must be >= 0")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.eval_view_count < 1:
            raise ValueError("eval_view_count must be >= 1")
        if self.cell_size is not None and not self.cell_size > 0:
            raise ValueError("cell_size must be positive")

    @property
    def uses_uncertainty(self) -> bool:
        return self.mode in UNCERTAINTY_MODES

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        """Accepts training keys either nested under ``train`` or flat alongside experiment keys."""
        own = {f.name for f in fields(cls)} - {"train"}
        train_keys = {f.name for f in fields(TrainConfig)}
        exp, train = {}, dict(data.get("train") or {})
        for key, value in data.items():
            if key == "train":
                continue
            if key in own:
                exp[key] = value
            elif key in train_keys:
                train[key] = value
            else:
                raise ValueError(f"unknown config key {key!r}")
        if "seed" in exp:
            train.setdefault("seed", exp["seed"])
        return cls(**exp, train=TrainConfig.from_dict(train))

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "train"}
        d["train"] = self.train.to_dict()
        return d


def load_config(path: str | Path) -> dict:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return data


# ---------------------------------------------------------------------------
# external posed images
# ---------------------------------------------------------------------------

def _orthonormalize(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def load_transforms(path: str | Path, background=(0.0, 0.0, 0.0), t_near: float | None = None,
                    t_far: float | None = None) -> list[PosedImage]:
    """Posed images from a NeRF-synthetic style ``transforms`` JSON.

    Frames need ``file_path`` and a camera-to-world ``transform_matrix``; the
    horizontal ``camera_angle_x`` sets the focal length. Cameras look down -z
    with +y up, the same convention as :class:`CameraPose`. Near/far come from
    the arguments, then ``near``/``far`` keys, then 2 and 6.
    """
    path = Path(path)
    meta = json.loads(path.read_text())
    frames = meta.get("frames")
    if not frames:
        raise ValueError(f"{path}: no frames")
    if "camera_angle_x" not in meta:
        raise ValueError(f"{path}: camera_angle_x missing")
    near = t_near if t_near is not None else float(meta.get("near", 2.0))
    far = t_far if t_far is not None else float(meta.get("far", 6.0))
    images = []
    for frame in frames:
        img_path = path.parent / frame["file_path"]
        if not img_path.suffix:
            img_path = img_path.with_suffix(".png")
        pixels = read_png(img_path, background)
        h, w = pixels.shape[:2]
        c2w = np.asarray(frame["transform_matrix"], dtype=np.float64)
        if c2w.shape != (4, 4):
            raise ValueError(f"{path}: transform_matrix must be 4x4")
        focal = 0.5 * w / math.tan(0.5 * float(meta["camera_angle_x"]))
        pose = CameraPose(c2w[:3, 3], _orthonormalize(c2w[:3, :3]), focal, w, h, near, far)
        images.append(PosedImage(pose, pixels))
    return images


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    run_dir: Path
    records: list[MetricRecord]
    selected: list[list[int]]
    initial_optimizer_steps: int
    total_optimizer_steps: int
    round_times: list[float]

    @property
    def post_initial_steps(self) -> int:
        return self.total_optimizer_steps - self.initial_optimizer_steps


def candidate_poses(cfg: ExperimentConfig, scene: Scene, eval_split: bool = False) -> list[CameraPose]:
    """The simulated candidate pool (or the eval views) of a run on ``scene``."""
    r = cfg.camera_radius
    reach = scene.bounding_radius * 1.05
    if r <= reach:
        raise ValueError("camera_radius must exceed the scene bounding radius")
    n, seed = (cfg.eval_view_count, cfg.seed + 1) if eval_split else (cfg.candidate_count, cfg.seed)
    return sample_sphere_views(n, r, hemisphere=cfg.hemisphere, seed=seed, width=cfg.image_width,
                               height=cfg.image_height, fov_degrees=cfg.fov_degrees, t_near=r - reach,
                               t_far=r + reach)


class _Capture:
    """Candidate poses and how to obtain their images."""

    def __init__(self, cfg: ExperimentConfig, scene: Scene | None):
        self.scene = scene
        self.steps = cfg.oracle_steps
        if cfg.transforms is not None:
            frames = load_transforms(cfg.transforms, scene.background_color if scene else (0.0, 0.0, 0.0))
            if len(frames) <= cfg.eval_view_count:
                raise ValueError("transforms file has too few frames for the eval split")
            self.eval_images = frames[-cfg.eval_view_count:]
            self.pool = frames[:-cfg.eval_view_count]
            self.candidates = [f.pose for f in self.pool]
        else:
            self.pool = None
            self.candidates = candidate_poses(cfg, scene)
            eval_poses = candidate_poses(cfg, scene, eval_split=True)
            self.eval_images = [oracle_render(scene, p, self.steps) for p in eval_poses]

    def capture(self, view_id: int) -> PosedImage:
        if self.pool is not None:
            return self.pool[view_id]
        return oracle_render(self.scene, self.candidates[view_id], self.steps)


def _write_rows(path: Path, header: Sequence[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


ACQUISITION_COLUMNS = ("round", "view_id", "score", "stride", "rays_evaluated", "selected", "rank")


def evaluate(state: TrainState, cfg: ExperimentConfig, eval_images: Sequence[PosedImage],
             cache: bayes.PosteriorCache | None = None) -> tuple[float, float, float, list]:
    """Mean PSNR, SSIM and predicted variance over the eval views, plus the renders."""
    rcfg = cfg.train.render_config(perturb=False)
    psnrs, ssims, variances, renders = [], [], [], []
    for img in eval_images:
        if cache is not None:
            rgb, var = bayes.render_image_with_posterior(state.coarse, state.fine, cache, img.pose, rcfg)
        else:
            out = render_image(state.coarse, state.fine, img.pose, rcfg)
            rgb, var = out.rgb, out.variance_map
        rgb = np.clip(rgb, 0.0, 1.0)
        psnrs.append(psnr(rgb, img.pixels))
        ssims.append(ssim(rgb, img.pixels) if min(img.pixels.shape[:2]) >= 11 else float("nan"))
        if var is not None:
            variances.append(float(np.mean(var)))
        renders.append((rgb, var))
    mean_var = float(np.mean(variances)) if variances else float("nan")
    return float(np.mean(psnrs)), float(np.mean(ssims)), mean_var, renders


def run_experiment(cfg: ExperimentConfig, run_dir: str | Path) -> ExperimentResult:
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run_dir / "renders").mkdir(exist_ok=True)
    torch.manual_seed(cfg.seed)

    tcfg = cfg.train.with_(seed=cfg.seed, uncertainty=cfg.uses_uncertainty)
    scene = load_scene(cfg.scene) if cfg.scene else (None if cfg.transforms else default_scene())
    with open(run_dir / "config.yaml", "w") as fh:
        yaml.safe_dump({**cfg.to_dict(), "train": tcfg.to_dict()}, fh, sort_keys=True)
    if scene is not None:
        save_scene(scene, run_dir / "scene.yaml")
        if tcfg.position_scale < 2.0 * scene.bounding_radius:
            log.warning("position_scale %.3g is below twice the scene radius; the encoding may alias",
                        tcfg.position_scale)

    cap = _Capture(cfg, scene)
    n_cand = len(cap.candidates)
    if cfg.n_initial_views > n_cand:
        raise ValueError("candidate pool is smaller than n_initial_views")
    rng = np.random.default_rng(derive_seed(cfg.seed, 11))
    initial_ids = sorted(int(i) for i in rng.choice(n_cand, size=cfg.n_initial_views, replace=False))
    available = [i for i in range(n_cand) if i not in set(initial_ids)]
    train_ids = list(initial_ids)
    train_images = [cap.capture(i) for i in initial_ids]

    records: list[MetricRecord] = []
    selected: list[list[int]] = [list(initial_ids)]
    acq_rows: list[list] = []
    round_times: list[float] = []
    log_path = run_dir / "train_log.csv"
    if log_path.exists():
        log_path.unlink()
    loop_kw = dict(log_every=cfg.log_every, log_path=log_path)

    t0 = time.perf_counter()
    state = init_train_state(tcfg, train_images)
    steps0 = cfg.steps_per_round if cfg.initial_steps is None else cfg.initial_steps
    tcfg_run = tcfg.with_(total_steps=max(steps0 + cfg.rounds * cfg.steps_per_round, 1))
    train_loop(state, None, tcfg_run, steps=steps0, **loop_kw)
    round_times.append(time.perf_counter() - t0)
    initial_steps_done = state.step
    ckpt_extra = lambda: {"train_views": list(train_ids), "train": tcfg.to_dict()}  # noqa: E731
    save_train_state(state, run_dir / "checkpoints" / "round_00.ckpt", ckpt_extra())

    cache = None
    if cfg.mode == "activenerf-be":
        cache = bayes.PosteriorCache(cfg.cell_size or bayes.default_cell_size(scene.bounding_radius if scene else 1.0))

    def record(rnd: int, use_cache: bool) -> list:
        p, s, v, renders = evaluate(state, cfg, cap.eval_images, cache if use_cache else None)
        records.append(MetricRecord(rnd, len(train_ids), p, s, v, round_times[-1]))
        log.info("round %d: %d views, psnr %.3f, ssim %.4f, mean variance %.4g", rnd, len(train_ids), p, s, v)
        return renders

    renders = record(0, False)
    rcfg = tcfg.render_config(perturb=False)
    for rnd in range(1, cfg.rounds + 1):
        t_round = time.perf_counter()
        new_ids: list[int] = []
        if cfg.mode != "static":
            if cfg.k_per_round > len(available):
                raise ValueError(f"candidate pool exhausted in round {rnd}")
            if cfg.uses_uncertainty:
                results = bayes.score_candidates(
                    state.coarse, state.fine, [cap.candidates[i] for i in available], cfg.stride, rcfg,
                    derive_seed(cfg.seed, 500 + rnd), available, cache, cfg.workers)
                ranked = bayes.rank_topk(results, len(results))
                new_ids = [vid for vid, _ in ranked[:cfg.k_per_round]]
                rank_of = {vid: k for k, (vid, _) in enumerate(ranked)}
                for r in results:
                    acq_rows.append([rnd, r.view_id, repr(r.score), r.stride, r.rays_evaluated,
                                     int(r.view_id in new_ids), rank_of[r.view_id]])
            else:
                strategy = "random" if cfg.mode == "nerf-random" else "fvs"
                picks = bayes.baseline_select(strategy, [cap.candidates[i] for i in available],
                                              [cap.candidates[i] for i in train_ids], cfg.k_per_round,
                                              derive_seed(cfg.seed, 500 + rnd))
                new_ids = [available[j] for j in picks]
                for k, vid in enumerate(new_ids):
                    acq_rows.append([rnd, vid, "", cfg.stride, 0, 1, k])
            available = [i for i in available if i not in set(new_ids)]
            train_ids.extend(new_ids)
        selected.append(list(new_ids))
        new_images = [cap.capture(i) for i in new_ids]

        if cfg.mode == "activenerf-be":
            bayes.bayesian_cache_build(state.coarse, state.fine, new_images, cache.cell_size, rcfg, cache=cache)
            cache.save(run_dir / "checkpoints" / f"cache_{rnd:02d}.bin")
        elif new_images:
            continuous_update(state, new_images, cfg.steps_per_round, tcfg_run, **loop_kw)
        else:
            train_loop(state, None, tcfg_run, steps=cfg.steps_per_round, **loop_kw)
        round_times.append(time.perf_counter() - t_round)
        save_train_state(state, run_dir / "checkpoints" / f"round_{rnd:02d}.ckpt", ckpt_extra())
        renders = record(rnd, cache is not None)

    for k, (rgb, var) in enumerate(renders):
        write_png(run_dir / "renders" / f"eval_{k:02d}.png", rgb)
        write_png(run_dir / "renders" / f"eval_{k:02d}_gt.png", cap.eval_images[k].pixels)
        if var is not None:
            write_variance_map(run_dir / "renders" / f"eval_{k:02d}_variance", var)

    write_report(records, run_dir / "metrics.csv", DETERMINISTIC_COLUMNS)
    write_report(records, run_dir / "timings.csv", REPORT_COLUMNS)
    _write_rows(run_dir / "acquisition.csv", ACQUISITION_COLUMNS, acq_rows)
    _write_rows(run_dir / "selected.csv", ("round", "view_id"),
                [[rnd, vid] for rnd, ids in enumerate(selected) for vid in ids])
    result = ExperimentResult(run_dir, records, selected, initial_steps_done, state.step, round_times)
    summary = {
        "mode": cfg.mode,
        "seed": cfg.seed,
        "initial_optimizer_steps": result.initial_optimizer_steps,
        "total_optimizer_steps": result.total_optimizer_steps,
        "post_initial_optimizer_steps": result.post_initial_steps,
        "final": asdict(records[-1]),
        "round_times_s": round_times,
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return result
