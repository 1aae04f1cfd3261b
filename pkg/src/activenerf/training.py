"""Losses, the optimization loop and continuous learning on newly captured views."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .field import EncodingConfig, FieldConfig, RadianceField, init_params, load_checkpoint, save_checkpoint
from .render import RayBatch, RenderConfig, camera_rays, derive_seed, observation_variance, render_rays
from .scene import PosedImage

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class TrainConfig:
    lr_initial: float = 5e-4
    lr_final: float = 5e-5
    batch_rays: int = 1024
    n_coarse: int = 64
    n_fine: int = 128
    lambda_reg: float = 0.01
    beta0_sq: float = 0.01
    total_steps: int = 5000
    new_ray_fraction: float = 0.5
    seed: int = 0
    # fine pass trained with squared error for this many initial steps before
    # the NLL takes over; at small step budgets the NLL from a random start
    # tends to collapse the fine density field
    nll_warmup_steps: int = 200
    # architecture
    width: int = 64
    depth: int = 8
    skip: int = 4
    l_position: int = 10
    l_direction: int = 4
    position_scale: float = 3.0
    density_activation: str = "shifted_softplus"
    uncertainty: bool = True
    # optimizer
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    perturb: bool = True
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("lr_initial", "lr_final", "batch_rays", "n_coarse", "beta0_sq", "width", "depth", "position_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.total_steps < 0 or self.n_fine < 0 or self.nll_warmup_steps < 0:
            raise ValueError("total_steps, n_fine and nll_warmup_steps must be >= 0")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be >= 0")
        if not 0.0 <= self.new_ray_fraction <= 1.0:
            raise ValueError("new_ray_fraction must lie in [0, 1]")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
        object.__setattr__(self, "background", tuple(float(b) for b in self.background))

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        """Appendix-scale settings: 256-wide MLP, 64 + 128 samples, 1024-ray batches."""
        base = dict(width=256, batch_rays=1024, n_coarse=64, n_fine=128, total_steps=200_000, nll_warmup_steps=0)
        return cls(**{**base, **overrides})

    @classmethod
    def quick(cls, **overrides) -> "TrainConfig":
        """Small, fast settings for single-core runs of a few hundred steps per round."""
        base = dict(width=64, depth=4, skip=3, l_position=6, batch_rays=256, n_coarse=32, n_fine=32,
                    lr_initial=5e-3, lr_final=5e-4)
        return cls(**{**base, **overrides})

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        return d

    def with_(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **kw})

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def field_config(self, fine: bool = True) -> FieldConfig:
        return FieldConfig(
            depth=self.depth, width=self.width, skip=self.skip,
            encoding=EncodingConfig(self.l_position, self.l_direction, self.position_scale),
            density_activation=self.density_activation,
            uncertainty=self.uncertainty and fine, beta0_sq=self.beta0_sq,
        )

    def render_config(self, perturb: bool | None = None, chunk: int = 2048) -> RenderConfig:
        return RenderConfig(self.n_coarse, self.n_fine, self.perturb if perturb is None else perturb,
                            self.background, chunk)


def learning_rate(step: int, config: TrainConfig) -> float:
    """Exponential decay from ``lr_initial`` at step 0 to ``lr_final`` at step ``total_steps - 1``."""
    span = max(config.total_steps - 1, 1)
    frac = min(max(step, 0), span) / span
    return config.lr_initial * (config.lr_final / config.lr_initial) ** frac


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _t(x, dtype=torch.float64) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)


def nll_reg_loss(means, variances, gts, sigmas, lam: float) -> torch.Tensor:
    """Gaussian ray NLL plus a density sparsity penalty.

    ``mean_i [ |C_i - mean_i|^2 / (2 var_i) + log(var_i) / 2 + lam * mean_j sigma_ij ]``
    with ``sigmas`` shaped (rays, samples).
    """
    means, variances, gts, sigmas = _t(means), _t(variances), _t(gts), _t(sigmas)
    if not (means.shape[0] == variances.shape[0] == gts.shape[0] == sigmas.shape[0]):
        raise ValueError("batch sizes of means, variances, targets and densities differ")
    if torch.any(variances <= 0):
        raise ValueError("ray variances must be positive")
    sq = ((gts - means) ** 2).sum(dim=-1)
    per_ray = sq / (2.0 * variances) + 0.5 * torch.log(variances) + lam * sigmas.mean(dim=-1)
    return per_ray.mean()


def combined_loss(coarse_colors, fine_means, fine_variances, gts, sigmas, lam: float) -> torch.Tensor:
    """Fine-pass NLL + regularizer plus the coarse pass mean squared error."""
    coarse_colors, gts = _t(coarse_colors), _t(gts)
    if coarse_colors.shape != gts.shape:
        raise ValueError("coarse colors and targets differ in shape")
    coarse = ((gts - coarse_colors) ** 2).sum(dim=-1).mean()
    return nll_reg_loss(fine_means, fine_variances, gts, sigmas, lam) + coarse


def vanilla_loss(coarse_colors, fine_colors, gts) -> torch.Tensor:
    """Per-ray mean of coarse plus fine squared errors (plain two-network loss)."""
    coarse_colors, fine_colors, gts = _t(coarse_colors), _t(fine_colors), _t(gts)
    if not coarse_colors.shape == fine_colors.shape == gts.shape:
        raise ValueError("coarse, fine and target colors differ in shape")
    return (((gts - coarse_colors) ** 2).sum(dim=-1) + ((gts - fine_colors) ** 2).sum(dim=-1)).mean()


def training_ray_variance(out, beta0_sq: float) -> torch.Tensor:
    """Ray variance used by the training NLL.

    With the plain rendered variance the log term runs to minus infinity on
    empty rays and drags the whole density field to zero; see
    :func:`observation_variance`.
    """
    return observation_variance(out.fine_var, out.residual, beta0_sq)


def render_loss(out, gts: torch.Tensor, config: TrainConfig, step: int | None = None) -> torch.Tensor:
    warm = step is not None and step < config.nll_warmup_steps
    if out.fine_var is None or warm:
        return vanilla_loss(out.coarse_rgb, out.fine_rgb, gts)
    return combined_loss(out.coarse_rgb, out.fine_rgb, training_ray_variance(out, config.beta0_sq), gts,
                         out.sigmas, config.lambda_reg)


# ---------------------------------------------------------------------------
# ray pool and training state
# ---------------------------------------------------------------------------

class RayPool:
    """All training rays, concatenated per source image, with a "new" tag."""

    def __init__(self, dtype: torch.dtype = torch.float32):
        self.dtype = dtype
        self.origins = torch.zeros((0, 3), dtype=dtype)
        self.directions = torch.zeros((0, 3), dtype=dtype)
        self.near = torch.zeros(0, dtype=dtype)
        self.far = torch.zeros(0, dtype=dtype)
        self.rgb = torch.zeros((0, 3), dtype=dtype)
        self.image_index = np.zeros(0, dtype=np.int64)
        self.is_new = np.zeros(0, dtype=bool)
        self.n_images = 0

    def __len__(self) -> int:
        return self.origins.shape[0]

    def add_images(self, images: Sequence[PosedImage], new: bool = False) -> None:
        for img in images:
            rays = camera_rays(img.pose, dtype=self.dtype)
            rgb = torch.as_tensor(img.pixels.reshape(-1, 3), dtype=self.dtype)
            self.origins = torch.cat([self.origins, rays.origins])
            self.directions = torch.cat([self.directions, rays.directions])
            self.near = torch.cat([self.near, rays.near])
            self.far = torch.cat([self.far, rays.far])
            self.rgb = torch.cat([self.rgb, rgb])
            self.image_index = np.concatenate([self.image_index, np.full(len(rays), self.n_images)])
            self.is_new = np.concatenate([self.is_new, np.full(len(rays), new)])
            self.n_images += 1

    def clear_new(self) -> None:
        self.is_new[:] = False

    def batch(self, idx: np.ndarray) -> tuple[RayBatch, torch.Tensor]:
        t = torch.as_tensor(idx)
        return RayBatch(self.origins[t], self.directions[t], self.near[t], self.far[t], idx.astype(np.int64)), self.rgb[t]


@dataclass
class TrainState:
    coarse: RadianceField
    fine: RadianceField
    optimizer: torch.optim.Adam
    step: int
    pool: RayPool
    last_loss: float = float("nan")

    def parameters(self) -> list[torch.nn.Parameter]:
        return list(self.coarse.parameters()) + list(self.fine.parameters())


def _make_optimizer(params, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=config.lr_initial, betas=(config.adam_beta1, config.adam_beta2),
                            eps=config.adam_eps, foreach=False)


def init_train_state(config: TrainConfig, dataset: Sequence[PosedImage] = ()) -> TrainState:
    dtype = config.torch_dtype
    coarse = init_params(derive_seed(config.seed, 1), config.field_config(fine=False), dtype)
    fine = init_params(derive_seed(config.seed, 2), config.field_config(fine=True), dtype)
    pool = RayPool(dtype)
    pool.add_images(dataset)
    opt = _make_optimizer(list(coarse.parameters()) + list(fine.parameters()), config)
    return TrainState(coarse, fine, opt, 0, pool)


def sample_batch_indices(state: TrainState, config: TrainConfig) -> np.ndarray:
    """Ray indices for the current step, honoring the new-image fraction."""
    n = len(state.pool)
    if n == 0:
        raise ValueError("training pool is empty")
    rng = np.random.default_rng([config.seed, state.step])
    new_idx = np.flatnonzero(state.pool.is_new)
    if new_idx.size == 0:
        return rng.integers(0, n, config.batch_rays)
    old_idx = np.flatnonzero(~state.pool.is_new)
    n_new = int(round(config.new_ray_fraction * config.batch_rays))
    if old_idx.size == 0:
        n_new = config.batch_rays
    picks_new = new_idx[rng.integers(0, new_idx.size, n_new)]
    picks_old = old_idx[rng.integers(0, max(old_idx.size, 1), config.batch_rays - n_new)] if n_new < config.batch_rays else old_idx[:0]
    return np.concatenate([picks_new, picks_old])


def batch_loss(state: TrainState, idx: np.ndarray, config: TrainConfig, step: int | None = None) -> torch.Tensor:
    rays, gts = state.pool.batch(idx)
    step = state.step if step is None else step
    out = render_rays(state.coarse, state.fine, rays, config.render_config(), derive_seed(config.seed, step))
    return render_loss(out, gts, config, step)


def apply_gradients(state: TrainState, config: TrainConfig) -> None:
    lr = learning_rate(state.step, config)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()


def train_step(state: TrainState, config: TrainConfig) -> TrainState:
    idx = sample_batch_indices(state, config)
    state.optimizer.zero_grad(set_to_none=False)
    loss = batch_loss(state, idx, config)
    loss.backward()
    apply_gradients(state, config)
    state.step += 1
    state.last_loss = float(loss.detach())
    return state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _adam_moments(state: TrainState) -> tuple[list[torch.Tensor], list[torch.Tensor], int]:
    firsts, seconds, steps = [], [], 0
    for p in state.parameters():
        st = state.optimizer.state.get(p)
        if st:
            firsts.append(st["exp_avg"])
            seconds.append(st["exp_avg_sq"])
            steps = int(st["step"])
        else:
            firsts.append(torch.zeros_like(p))
            seconds.append(torch.zeros_like(p))
    return firsts, seconds, steps


def save_train_state(state: TrainState, path: str | Path, extra: dict | None = None) -> None:
    firsts, seconds, adam_step = _adam_moments(state)
    save_checkpoint(path, {"coarse": state.coarse, "fine": state.fine}, state.step,
                    (firsts, seconds) if adam_step else None, adam_step, extra)


def load_train_state(path: str | Path, config: TrainConfig, dataset: Sequence[PosedImage] = ()) -> TrainState:
    ckpt = load_checkpoint(path, config.torch_dtype)
    coarse, fine = ckpt.networks["coarse"], ckpt.networks["fine"]
    params = list(coarse.parameters()) + list(fine.parameters())
    opt = _make_optimizer(params, config)
    if ckpt.moments is not None and ckpt.adam_step > 0:
        for p, m, v in zip(params, *ckpt.moments):
            opt.state[p] = {"step": torch.tensor(float(ckpt.adam_step)), "exp_avg": m.clone(),
                            "exp_avg_sq": v.clone()}
    pool = RayPool(config.torch_dtype)
    pool.add_images(dataset)
    return TrainState(coarse, fine, opt, ckpt.step, pool)


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------

LOG_COLUMNS = ("step", "loss", "psnr_eval", "mean_variance", "wall_time_s")


def train_loop(
    state: TrainState,
    dataset: Sequence[PosedImage] | None,
    config: TrainConfig,
    steps: int | None = None,
    checkpoint_every: int = 0,
    checkpoint_dir: str | Path | None = None,
    log_every: int = 0,
    log_path: str | Path | None = None,
    evaluate: Callable[[TrainState], tuple[float, float]] | None = None,
) -> TrainState:
    """Run ``steps`` training steps (default ``config.total_steps``).

    ``dataset`` images, if given, are appended to the pool first. Every
    ``log_every`` steps a row goes to the CSV at ``log_path``; ``evaluate``
    (returning held-out PSNR and mean variance) fills the eval columns.
    """
    if dataset:
        state.pool.add_images(dataset)
    steps = config.total_steps if steps is None else steps
    if steps <= 0:
        return state
    # denormal Adam moments slow CPU matmuls several-fold late in training
    torch.set_flush_denormal(True)
    writer = None
    fh = None
    if log_path is not None and log_every > 0:
        new_file = not Path(log_path).exists()
        fh = open(log_path, "a", newline="")
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(LOG_COLUMNS)
    start = time.perf_counter()
    losses = []
    try:
        for _ in range(steps):
            train_step(state, config)
            losses.append(state.last_loss)
            if writer is not None and state.step % log_every == 0:
                psnr_eval, mean_var = evaluate(state) if evaluate else (math.nan, math.nan)
                writer.writerow([state.step, f"{np.mean(losses):.6f}", f"{psnr_eval:.4f}", f"{mean_var:.6g}",
                                 f"{time.perf_counter() - start:.3f}"])
                fh.flush()
                losses = []
            if checkpoint_every and checkpoint_dir is not None and state.step % checkpoint_every == 0:
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                save_train_state(state, Path(checkpoint_dir) / f"step_{state.step:07d}.ckpt")
    finally:
        if fh is not None:
            fh.close()
    return state


def continuous_update(state: TrainState, new_images: Sequence[PosedImage], extra_steps: int,
                      config: TrainConfig, **loop_kwargs) -> TrainState:
    """Add captured views tagged "new", train with the new-ray fraction, then clear the tags."""
    if extra_steps < 0:
        raise ValueError("extra_steps must be >= 0")
    state.pool.add_images(new_images, new=True)
    try:
        train_loop(state, None, config, steps=extra_steps, **loop_kwargs)
    finally:
        state.pool.clear_new()
    return state
