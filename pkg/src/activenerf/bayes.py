"""Closed-form Gaussian posteriors, acquisition scores and view selection.

For a sample at depth ``t_k`` on a new ray, the model gives a prior color
``N(c_k, v_k)``. The ray color is modeled as ``N(a_k c + b_k, V)`` where ``V``
is the ray's observation variance (see ``render.observation_variance``)
and ``b_k = C_ray - a_k c_k`` collects every other sample's contribution.
Conditioning on an observed ray color ``C`` gives::

    gamma     = a^2 v / (a^2 v + V)
    post_var  = v V / (a^2 v + V)  =  (1/v + a^2/V)^-1
    post_mean = gamma (C - b) / a + (1 - gamma) c

Several rays through one location add precisions: ``1/post_var = 1/v +
sum_i a_i^2 / V_i``. The variance never needs the observation, which is what
makes scoring candidate views possible before capturing them.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .field import RadianceField
from .render import Ray, RayBatch, RenderConfig, camera_rays, observation_variance, pixel_grid, render_rays
from .scene import CameraPose, PosedImage


@dataclass
class SamplePrior:
    position: np.ndarray
    alpha: float
    prior_mean: np.ndarray
    prior_var: float
    ray_var: float
    ray_mean: np.ndarray

    def __post_init__(self):
        if not self.prior_var > 0:
            raise ValueError("prior_var must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not self.ray_var > 0 and self.alpha > 0:
            raise ValueError("ray_var must be positive")

    @property
    def b(self) -> np.ndarray:
        """Mean contribution of everything on the ray except this sample."""
        return np.asarray(self.ray_mean, dtype=np.float64) - self.alpha * np.asarray(self.prior_mean, dtype=np.float64)


@dataclass
class PosteriorUpdate:
    gamma: float | np.ndarray
    post_mean: np.ndarray | None
    post_var: float | np.ndarray


def conjugate_update(prior_mean, prior_var, alpha, ray_var, observed=None, b=None) -> PosteriorUpdate:
    """Posterior of one location's color after one ray observation.

    Works elementwise on arrays; colors carry a trailing channel axis. With
    ``alpha == 0`` the prior is returned unchanged and nothing is divided.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    pv = np.asarray(prior_var, dtype=np.float64)
    rv = np.asarray(ray_var, dtype=np.float64)
    active = alpha > 0
    a2pv = alpha * alpha * pv
    denom = np.where(active, a2pv + rv, 1.0)
    gamma = np.where(active, a2pv / denom, 0.0)
    post_var = np.where(active, pv * rv / denom, pv)
    post_mean = None
    if observed is not None:
        pm = np.asarray(prior_mean, dtype=np.float64)
        target = (np.asarray(observed, dtype=np.float64) - np.asarray(b, dtype=np.float64)) / np.where(active, alpha, 1.0)[..., None]
        g = gamma[..., None]
        post_mean = np.where(active[..., None], g * target + (1.0 - g) * pm, pm)
    if gamma.ndim == 0:
        return PosteriorUpdate(float(gamma), post_mean, float(post_var))
    return PosteriorUpdate(gamma, post_mean, post_var)


def posterior_single(prior: SamplePrior, observed=None) -> PosteriorUpdate:
    """Posterior for one sample given (optionally) the observed ray color.

    Without ``observed`` only ``gamma`` and ``post_var`` are returned.
    """
    obs = None if observed is None else np.broadcast_to(np.asarray(observed, dtype=np.float64), (3,))
    return conjugate_update(np.asarray(prior.prior_mean, dtype=np.float64), prior.prior_var, prior.alpha,
                            prior.ray_var, obs, prior.b if obs is not None else None)


def posterior_multi(prior_mean, prior_var: float, observations: Sequence[tuple]) -> PosteriorUpdate:
    """Joint posterior of one location seen by several rays.

    ``observations`` holds ``(alpha, ray_var, observed, b)`` tuples;
    ``observed`` may be ``None`` for a variance-only update. ``gamma`` is the
    weight array ``(gamma_1, ..., gamma_n, gamma_prior)``; it sums to one.
    """
    if len(observations) == 0:
        raise ValueError("posterior_multi needs at least one observation")
    if not prior_var > 0:
        raise ValueError("prior_var must be positive")
    prec_terms = []
    for alpha, ray_var, _, _ in observations:
        if not ray_var > 0:
            raise ValueError("every ray_var must be positive")
        prec_terms.append(alpha * alpha / ray_var)
    precision = 1.0 / prior_var + math.fsum(prec_terms)
    post_var = 1.0 / precision
    gammas = np.array([p * post_var for p in prec_terms] + [post_var / prior_var])
    post_mean = None
    if all(obs[2] is not None for obs in observations):
        pm = np.asarray(prior_mean, dtype=np.float64)
        post_mean = gammas[-1] * pm
        for g, (alpha, _, observed, b) in zip(gammas[:-1], observations):
            if alpha > 0:
                post_mean = post_mean + g * (np.asarray(observed, dtype=np.float64) - np.asarray(b, dtype=np.float64)) / alpha
    return PosteriorUpdate(gammas, post_mean, post_var)


def info_gain_ray(priors: Sequence[SamplePrior]) -> float:
    """Total variance reduction over a ray's samples: ``sum_k (prior - posterior)``."""
    if len(priors) == 0:
        return 0.0
    a = np.array([p.alpha for p in priors])
    pv = np.array([p.prior_var for p in priors])
    rv = np.array([p.ray_var for p in priors])
    return math.fsum(_variance_drop(a, pv, rv).tolist())


def _variance_drop(a: np.ndarray, pv: np.ndarray, rv: np.ndarray) -> np.ndarray:
    # prior - posterior rewritten as a^2 v^2 / (a^2 v + V): non-negative, zero iff a == 0
    a2pv = a * a * pv
    active = a > 0
    return np.where(active, a2pv * pv / np.where(active, a2pv + rv, 1.0), 0.0)


# ---------------------------------------------------------------------------
# per-ray priors from a rendering pass
# ---------------------------------------------------------------------------

def _render_numpy(coarse, fine, rays: RayBatch, config: RenderConfig, seed: int) -> dict:
    if not fine.uncertainty:
        raise ValueError("Bayesian operations need a fine field with a variance head")
    with torch.no_grad():
        out = render_rays(coarse, fine, rays, config, seed)
    f64 = lambda x: x.numpy().astype(np.float64)  # noqa: E731
    return {
        "alpha": f64(out.alphas),
        "prior_mean": f64(out.colors),
        "prior_var": f64(out.variances),
        "position": f64(out.positions),
        "ray_mean": f64(out.fine_rgb),
        "ray_var": f64(observation_variance(out.fine_var, out.residual, fine.config.beta0_sq)),
        "residual": f64(out.residual),
    }


def ray_prior_terms(coarse: RadianceField, fine: RadianceField, ray: Ray, config: RenderConfig,
                    seed: int = 0) -> list[SamplePrior]:
    r = _render_numpy(coarse, fine, RayBatch.from_rays([ray]), config, seed)
    return [
        SamplePrior(r["position"][0, k], float(r["alpha"][0, k]), r["prior_mean"][0, k],
                    float(r["prior_var"][0, k]), float(r["ray_var"][0]), r["ray_mean"][0])
        for k in range(r["alpha"].shape[1])
    ]


# ---------------------------------------------------------------------------
# acquisition
# ---------------------------------------------------------------------------

@dataclass
class AcquisitionResult:
    view_id: int
    score: float
    rays_evaluated: int
    stride: int


def ray_gains(coarse, fine, rays: RayBatch, config: RenderConfig, seed: int = 0,
              cache: PosteriorCache | None = None) -> np.ndarray:
    """Information gain of every ray in the batch (fine-pass samples only).

    With a ``cache`` the current beliefs are the cached posteriors, so the
    sample variances and the ray variance are recomputed from them first.
    """
    gains = []
    for s in range(0, len(rays), config.chunk):
        r = _render_numpy(coarse, fine, rays[s:s + config.chunk], config, seed)
        pv, rv = r["prior_var"], r["ray_var"]
        if cache is not None:
            _, pv = _posterior_samples(cache, r)
            rv = observation_variance((r["alpha"] ** 2 * pv).sum(axis=1), r["residual"], fine.config.beta0_sq)
        drop = _variance_drop(r["alpha"], pv, rv[:, None])
        gains.append(drop.sum(axis=1))
    return np.concatenate(gains) if gains else np.zeros(0)


def acquisition_score(coarse: RadianceField, fine: RadianceField, pose: CameraPose, stride: int,
                      config: RenderConfig, seed: int = 0, view_id: int = 0,
                      cache: PosteriorCache | None = None) -> AcquisitionResult:
    """Summed information gain over the pixel grid ``(i*stride, j*stride)`` of a candidate view."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    px, py = pixel_grid(pose, stride)
    rays = camera_rays(pose, px, py, dtype=next(fine.parameters()).dtype)
    gains = ray_gains(coarse, fine, rays, config, seed, cache)
    return AcquisitionResult(view_id, math.fsum(gains.tolist()), len(px), stride)


def score_candidates(coarse, fine, candidates: Sequence[CameraPose], stride: int, config: RenderConfig,
                     seed: int = 0, view_ids: Sequence[int] | None = None, cache: PosteriorCache | None = None,
                     workers: int = 1) -> list[AcquisitionResult]:
    """Score every candidate; ``workers > 1`` fans out over a thread pool (order is kept)."""
    ids = list(range(len(candidates))) if view_ids is None else list(view_ids)
    if len(ids) != len(candidates):
        raise ValueError("view_ids and candidates differ in length")

    def one(item):
        vid, pose = item
        return acquisition_score(coarse, fine, pose, stride, config, seed, vid, cache)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(one, zip(ids, candidates)))
    return [one(item) for item in zip(ids, candidates)]


def rank_topk(results: Sequence[AcquisitionResult], k: int) -> list[tuple[int, float]]:
    """Top ``k`` by descending score, ties to the lower view id."""
    if not 1 <= k <= len(results):
        raise ValueError(f"k={k} outside [1, {len(results)}]")
    ordered = sorted(results, key=lambda r: (-r.score, r.view_id))
    return [(r.view_id, r.score) for r in ordered[:k]]


def select_topk(coarse, fine, candidates: Sequence[CameraPose], k: int, stride: int, config: RenderConfig,
                seed: int = 0) -> list[tuple[int, float]]:
    if not 1 <= k <= len(candidates):
        raise ValueError(f"k={k} outside [1, {len(candidates)}]")
    return rank_topk(score_candidates(coarse, fine, candidates, stride, config, seed), k)


def baseline_select(strategy: str, candidates: Sequence[CameraPose], training_poses: Sequence[CameraPose],
                    k: int, seed: int = 0) -> list[int]:
    """Random (uniform without replacement) or furthest-view selection.

    Furthest-view picks greedily the candidate whose camera center is farthest
    from the nearest of the training cameras and earlier picks.
    """
    n = len(candidates)
    if not 0 <= k <= n:
        raise ValueError(f"k={k} outside [0, {n}]")
    if strategy == "random":
        return [int(i) for i in np.random.default_rng(seed).choice(n, size=k, replace=False)]
    if strategy != "fvs":
        raise ValueError(f"unknown strategy {strategy!r}")
    cand = np.stack([c.position for c in candidates]) if n else np.zeros((0, 3))
    anchors = [p.position for p in training_poses]
    if anchors:
        dmin = np.min(np.linalg.norm(cand[:, None, :] - np.stack(anchors)[None], axis=-1), axis=1)
    else:
        dmin = np.full(n, np.inf)
    picked: list[int] = []
    available = np.ones(n, dtype=bool)
    for _ in range(k):
        scores = np.where(available, dmin, -np.inf)
        j = int(np.argmax(scores))  # first maximum -> lowest index on ties
        picked.append(j)
        available[j] = False
        dmin = np.minimum(dmin, np.linalg.norm(cand - cand[j], axis=-1))
    return picked


# ---------------------------------------------------------------------------
# posterior cache for training-free inference
# ---------------------------------------------------------------------------

_KEY_BITS = 21
_KEY_OFFSET = 1 << (_KEY_BITS - 1)


def _cell_keys(positions: np.ndarray, cell_size: float) -> np.ndarray:
    idx = np.floor(positions / cell_size).astype(np.int64) + _KEY_OFFSET
    if np.any(idx < 0) or np.any(idx >= (1 << _KEY_BITS)):
        raise ValueError("position outside the addressable cache volume")
    return (idx[..., 0] << (2 * _KEY_BITS)) | (idx[..., 1] << _KEY_BITS) | idx[..., 2]


def _key_to_cell(keys: np.ndarray) -> np.ndarray:
    mask = (1 << _KEY_BITS) - 1
    return np.stack([(keys >> (2 * _KEY_BITS)) & mask, (keys >> _KEY_BITS) & mask, keys & mask], axis=-1) - _KEY_OFFSET


class PosteriorCache:
    """Voxel-hashed accumulation of ray observations.

    Each occupied cell keeps the observation count, the summed precision
    ``sum a^2 / V``, the summed precision-weighted target ``sum a (C - b) / V``
    per channel, and a snapshot of the prior (mean, variance) of the first
    sample recorded in it.
    """

    def __init__(self, cell_size: float, min_alpha: float = 1e-4):
        if not cell_size > 0:
            raise ValueError("cell_size must be positive")
        self.cell_size = float(cell_size)
        self.min_alpha = float(min_alpha)
        self.keys = np.zeros(0, dtype=np.int64)
        self.count = np.zeros(0, dtype=np.int64)
        self.precision = np.zeros(0)
        self.weighted = np.zeros((0, 3))
        self.prior_mean = np.zeros((0, 3))
        self.prior_var = np.zeros(0)
        self._first = np.zeros(0, dtype=np.int64)
        self._n_obs = 0

    def __len__(self) -> int:
        return self.keys.size

    @property
    def cells(self) -> np.ndarray:
        return _key_to_cell(self.keys)

    def add_observations(self, positions, alpha, prior_mean, prior_var, ray_mean, ray_var, observed) -> int:
        """Fold per-sample observation terms into the cells; returns how many were kept."""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
        prior_mean = np.asarray(prior_mean, dtype=np.float64).reshape(-1, 3)
        prior_var = np.asarray(prior_var, dtype=np.float64).reshape(-1)
        ray_var = np.asarray(ray_var, dtype=np.float64).reshape(-1)
        ray_mean = np.asarray(ray_mean, dtype=np.float64).reshape(-1, 3)
        observed = np.asarray(observed, dtype=np.float64).reshape(-1, 3)
        keep = (alpha > self.min_alpha) & (alpha > 0)
        if not keep.any():
            return 0
        a = alpha[keep]
        rv = ray_var[keep]
        b = ray_mean[keep] - a[:, None] * prior_mean[keep]
        prec = a * a / rv
        wt = (a / rv)[:, None] * (observed[keep] - b)
        order = self._n_obs + np.arange(a.size)
        self._n_obs += a.size

        keys = np.concatenate([self.keys, _cell_keys(positions[keep], self.cell_size)])
        counts = np.concatenate([self.count, np.ones(a.size, dtype=np.int64)])
        precs = np.concatenate([self.precision, prec])
        wts = np.concatenate([self.weighted, wt])
        pms = np.concatenate([self.prior_mean, prior_mean[keep]])
        pvs = np.concatenate([self.prior_var, prior_var[keep]])
        firsts = np.concatenate([self._first, order])

        uniq, inv = np.unique(keys, return_inverse=True)
        m = uniq.size
        self.keys = uniq
        self.count = np.bincount(inv, weights=counts, minlength=m).astype(np.int64)
        self.precision = np.bincount(inv, weights=precs, minlength=m)
        self.weighted = np.stack([np.bincount(inv, weights=wts[:, c], minlength=m) for c in range(3)], axis=1)
        # prior snapshot from the earliest observation in each cell
        srt = np.lexsort((firsts, inv))
        head = srt[np.r_[True, inv[srt][1:] != inv[srt][:-1]]]
        self.prior_mean = pms[head]
        self.prior_var = pvs[head]
        self._first = firsts[head]
        return int(a.size)

    def lookup(self, positions) -> tuple[np.ndarray, np.ndarray]:
        """Row index of each position's cell, and a found mask."""
        keys = _cell_keys(np.asarray(positions, dtype=np.float64), self.cell_size)
        if self.keys.size == 0:
            return np.zeros(keys.shape, dtype=np.int64), np.zeros(keys.shape, dtype=bool)
        rows = np.searchsorted(self.keys, keys).clip(max=self.keys.size - 1)
        return rows, self.keys[rows] == keys

    def posterior(self, rows, prior_mean=None, prior_var=None) -> tuple[np.ndarray, np.ndarray]:
        """Posterior (mean, variance) for cached rows.

        Uses the stored prior snapshot unless a prior is supplied.
        """
        pm = self.prior_mean[rows] if prior_mean is None else np.asarray(prior_mean, dtype=np.float64)
        pv = self.prior_var[rows] if prior_var is None else np.asarray(prior_var, dtype=np.float64)
        post_var = 1.0 / (1.0 / pv + self.precision[rows])
        post_mean = post_var[..., None] * (pm / pv[..., None] + self.weighted[rows])
        return post_mean, post_var

    # serialization ----------------------------------------------------------
    #   magic b"ANRFPCCH", version uint32, cell_size float64, min_alpha float64,
    #   n_cells uint64, then n_cells packed records (little-endian):
    #   cell index 3 x int64, count uint32, precision float64,
    #   weighted target 3 x float64, prior mean 3 x float64, prior var float64
    MAGIC = b"ANRFPCCH"
    RECORD = np.dtype([("cell", "<i8", 3), ("count", "<u4"), ("precision", "<f8"),
                       ("weighted", "<f8", 3), ("prior_mean", "<f8", 3), ("prior_var", "<f8")])

    def save(self, path: str | Path) -> None:
        rec = np.zeros(len(self), dtype=self.RECORD)
        rec["cell"] = self.cells
        rec["count"] = self.count
        rec["precision"] = self.precision
        rec["weighted"] = self.weighted
        rec["prior_mean"] = self.prior_mean
        rec["prior_var"] = self.prior_var
        with open(path, "wb") as fh:
            fh.write(self.MAGIC)
            fh.write(struct.pack("<IddQ", 1, self.cell_size, self.min_alpha, len(self)))
            fh.write(rec.tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "PosteriorCache":
        data = Path(path).read_bytes()
        if data[:8] != cls.MAGIC:
            raise ValueError(f"{path}: not a posterior cache file")
        version, cell_size, min_alpha, n = struct.unpack_from("<IddQ", data, 8)
        if version != 1:
            raise ValueError(f"{path}: unsupported cache version {version}")
        rec = np.frombuffer(data, dtype=cls.RECORD, count=n, offset=8 + struct.calcsize("<IddQ"))
        cache = cls(cell_size, min_alpha)
        cell = rec["cell"].astype(np.int64) + _KEY_OFFSET
        cache.keys = (cell[:, 0] << (2 * _KEY_BITS)) | (cell[:, 1] << _KEY_BITS) | cell[:, 2]
        cache.count = rec["count"].astype(np.int64)
        cache.precision = rec["precision"].copy()
        cache.weighted = rec["weighted"].copy()
        cache.prior_mean = rec["prior_mean"].copy()
        cache.prior_var = rec["prior_var"].copy()
        cache._first = np.arange(n, dtype=np.int64)
        cache._n_obs = int(cache.count.sum())
        return cache


def default_cell_size(bounding_radius: float) -> float:
    return bounding_radius / 128.0


def bayesian_cache_build(coarse: RadianceField, fine: RadianceField, new_images: Sequence[PosedImage],
                         cell_size: float, config: RenderConfig, seed: int = 0,
                         cache: PosteriorCache | None = None, min_alpha: float = 1e-4) -> PosteriorCache:
    """Condition every sample of every pixel ray of ``new_images`` on its observed color."""
    cache = PosteriorCache(cell_size, min_alpha) if cache is None else cache
    dtype = next(fine.parameters()).dtype
    for img in new_images:
        rays = camera_rays(img.pose, dtype=dtype)
        gt = img.pixels.reshape(-1, 3)
        for s in range(0, len(rays), config.chunk):
            r = _render_numpy(coarse, fine, rays[s:s + config.chunk], config, seed)
            n, m = r["alpha"].shape
            cache.add_observations(
                r["position"].reshape(-1, 3), r["alpha"].reshape(-1), r["prior_mean"].reshape(-1, 3),
                r["prior_var"].reshape(-1), np.repeat(r["ray_mean"], m, axis=0), np.repeat(r["ray_var"], m),
                np.repeat(gt[s:s + n], m, axis=0),
            )
    return cache


def _posterior_samples(cache: PosteriorCache, r: dict, use_snapshot_prior: bool = False,
                       clip_colors: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample (color, variance) with cached posteriors substituted in occupied cells."""
    colors = r["prior_mean"].copy()
    variances = r["prior_var"].copy()
    if len(cache) == 0:
        return colors, variances
    rows, found = cache.lookup(r["position"])
    if found.any():
        hit = rows[found]
        if use_snapshot_prior:
            pm, pv = cache.posterior(hit)
        else:
            pm, pv = cache.posterior(hit, colors[found], variances[found])
        colors[found] = np.clip(pm, 0.0, 1.0) if clip_colors else pm
        variances[found] = pv
    return colors, variances


def render_with_posterior(coarse: RadianceField, fine: RadianceField, cache: PosteriorCache, rays: RayBatch,
                          config: RenderConfig, seed: int = 0, use_snapshot_prior: bool = False,
                          clip_colors: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Ray (mean, variance) with posterior colors and variances in occupied cells.

    Sample positions and alpha weights come from the unchanged model, so the
    compositing is the ordinary one. By default a sample's posterior combines
    its own prior with the cached observation sums; ``use_snapshot_prior``
    uses the prior stored in the cell instead.
    """
    bg = np.asarray(config.background, dtype=np.float64)
    means, variances = [], []
    for s in range(0, len(rays), config.chunk):
        r = _render_numpy(coarse, fine, rays[s:s + config.chunk], config, seed)
        c, v = _posterior_samples(cache, r, use_snapshot_prior, clip_colors)
        a = r["alpha"]
        means.append((a[..., None] * c).sum(axis=1) + r["residual"][:, None] * bg)
        variances.append((a * a * v).sum(axis=1))
    if not means:
        return np.zeros((0, 3)), np.zeros(0)
    return np.concatenate(means), np.concatenate(variances)


def render_image_with_posterior(coarse, fine, cache: PosteriorCache, pose: CameraPose, config: RenderConfig,
                                seed: int = 0, **kwargs) -> tuple[np.ndarray, np.ndarray]:
    rays = camera_rays(pose, dtype=next(fine.parameters()).dtype)
    mean, var = render_with_posterior(coarse, fine, cache, rays, config, seed, **kwargs)
    return mean.reshape(pose.height, pose.width, 3), var.reshape(pose.height, pose.width)
