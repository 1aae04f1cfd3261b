"""Ray generation, sampling and Gaussian volume compositing.

Per location the fine field predicts a Gaussian color ``N(c_i, var_i)``; the
rendered ray color is then ``N(sum a_i c_i, sum a_i^2 var_i)`` with the usual
alpha weights ``a_i = T_i (1 - exp(-sigma_i delta_i))``. The variance is a
scalar shared by the three channels.

Random numbers come from a counter-based hash keyed on ``(seed, ray id)`` so a
ray's samples do not depend on batch composition, chunking or pixel order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .field import RadianceField
from .scene import CameraPose


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *keys: int) -> int:
    """Mix integer keys into a seed (stable across platforms)."""
    h = _splitmix64(np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF))
    for k in keys:
        h = _splitmix64(h ^ np.uint64(int(k) & 0xFFFFFFFFFFFFFFFF))
    return int(h)


def uniform_stream(seed: int, ray_ids, n: int, salt: int = 0) -> np.ndarray:
    """``(len(ray_ids), n)`` uniforms in [0, 1), independent per ray id."""
    ids = np.asarray(ray_ids, dtype=np.int64).astype(np.uint64)
    key = np.uint64(derive_seed(seed, salt))
    h = _splitmix64(ids ^ key)
    with np.errstate(over="ignore"):
        z = _splitmix64(h[:, None] + np.arange(n, dtype=np.uint64)[None, :] * np.uint64(0x632BE59BD9B4E019))
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


# ---------------------------------------------------------------------------
# rays
# ---------------------------------------------------------------------------

@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        if not self.t_near < self.t_far:
            raise ValueError("need t_near < t_far")


@dataclass
class RayBatch:
    origins: torch.Tensor
    directions: torch.Tensor
    near: torch.Tensor
    far: torch.Tensor
    ids: np.ndarray

    def __len__(self) -> int:
        return self.origins.shape[0]

    def __getitem__(self, idx) -> "RayBatch":
        return RayBatch(self.origins[idx], self.directions[idx], self.near[idx], self.far[idx],
                        self.ids[np.asarray(idx) if not isinstance(idx, slice) else idx])

    def to(self, dtype: torch.dtype) -> "RayBatch":
        return RayBatch(self.origins.to(dtype), self.directions.to(dtype), self.near.to(dtype),
                        self.far.to(dtype), self.ids)

    @classmethod
    def from_rays(cls, rays: list[Ray], ids=None, dtype=torch.float64) -> "RayBatch":
        return cls(
            torch.as_tensor(np.stack([r.origin for r in rays]), dtype=dtype),
            torch.as_tensor(np.stack([r.direction for r in rays]), dtype=dtype),
            torch.as_tensor([r.t_near for r in rays], dtype=dtype),
            torch.as_tensor([r.t_far for r in rays], dtype=dtype),
            np.arange(len(rays)) if ids is None else np.asarray(ids),
        )


def pixel_ray(pose: CameraPose, px: int, py: int) -> Ray:
    """Pinhole ray through the center of pixel ``(px, py)``.

    Pixel x grows to the camera's right and pixel y grows downward; the camera
    looks down its local -z axis.
    """
    if not (0 <= px < pose.width and 0 <= py < pose.height):
        raise ValueError(f"pixel ({px}, {py}) outside {pose.width}x{pose.height} image")
    d = pose.pixel_directions(np.array([px]), np.array([py]))[0]
    return Ray(pose.position.copy(), d, pose.t_near, pose.t_far)


def pixel_grid(pose: CameraPose, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates ``(i*stride, j*stride)`` in row-major order."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ys = np.arange(0, pose.height, stride)
    xs = np.arange(0, pose.width, stride)
    py, px = np.meshgrid(ys, xs, indexing="ij")
    return px.reshape(-1), py.reshape(-1)


def camera_rays(pose: CameraPose, px=None, py=None, dtype: torch.dtype = torch.float32) -> RayBatch:
    """Rays for the given pixels (all pixels by default); ids are ``py*W + px``."""
    if px is None:
        px, py = pixel_grid(pose)
    px = np.asarray(px)
    py = np.asarray(py)
    dirs = pose.pixel_directions(px, py)
    n = dirs.shape[0]
    return RayBatch(
        torch.as_tensor(np.broadcast_to(pose.position, (n, 3)).copy(), dtype=dtype),
        torch.as_tensor(dirs, dtype=dtype),
        torch.full((n,), pose.t_near, dtype=dtype),
        torch.full((n,), pose.t_far, dtype=dtype),
        (py * pose.width + px).astype(np.int64),
    )


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

@dataclass
class RaySamples:
    t_values: np.ndarray
    deltas: np.ndarray
    t_near: float
    t_far: float


def _deltas(t: torch.Tensor, far: torch.Tensor) -> torch.Tensor:
    return torch.cat([t[..., 1:] - t[..., :-1], far[..., None] - t[..., -1:]], dim=-1)


def stratified_t(near: torch.Tensor, far: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """One depth per equal-width bin: ``near + (i + u_i) / n * (far - near)``."""
    n = u.shape[-1]
    i = torch.arange(n, dtype=u.dtype)
    return near[..., None] + (i + u) / n * (far - near)[..., None]


def stratified_samples(ray: Ray, n: int, seed: int) -> RaySamples:
    if n < 1:
        raise ValueError("n must be >= 1")
    u = torch.as_tensor(uniform_stream(seed, [0], n, salt=1))
    near = torch.tensor([ray.t_near], dtype=torch.float64)
    far = torch.tensor([ray.t_far], dtype=torch.float64)
    t = stratified_t(near, far, u)
    return RaySamples(t[0].numpy(), _deltas(t, far)[0].numpy(), ray.t_near, ray.t_far)


def sample_pdf(t: torch.Tensor, deltas: torch.Tensor, weights: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Inverse-transform samples from the piecewise-constant density over bins.

    Bin ``i`` spans ``[t_i, t_i + delta_i]`` and carries probability mass
    proportional to ``weights_i`` (uniform if all weights are zero). ``u``
    holds ascending uniforms in [0, 1), one row per ray.
    """
    w = weights.clamp(min=0)
    total = w.sum(dim=-1, keepdim=True)
    w = torch.where(total > 0, w, torch.ones_like(w))
    cdf = torch.cumsum(w, dim=-1)
    cdf = cdf / cdf[..., -1:]
    cdf = torch.cat([cdf[..., :-1], torch.ones_like(cdf[..., -1:])], dim=-1)
    idx = torch.searchsorted(cdf.contiguous(), u.contiguous(), right=True).clamp(max=t.shape[-1] - 1)
    cdf_lo = torch.cat([torch.zeros_like(cdf[..., :1]), cdf[..., :-1]], dim=-1)
    lo = torch.gather(cdf_lo, -1, idx)
    mass = torch.gather(cdf, -1, idx) - lo
    frac = ((u - lo) / torch.where(mass > 0, mass, torch.ones_like(mass))).clamp(0.0, 1.0)
    start = torch.gather(t, -1, idx)
    width = torch.gather(deltas, -1, idx)
    return start + frac * width


def hierarchical_resample(coarse: RaySamples, coarse_alphas, n_fine: int, seed: int) -> RaySamples:
    """Draw ``n_fine`` depths from the coarse weights and merge them with the coarse set."""
    if n_fine < 1:
        raise ValueError("n_fine must be >= 1")
    t = torch.as_tensor(coarse.t_values, dtype=torch.float64)[None]
    d = torch.as_tensor(coarse.deltas, dtype=torch.float64)[None]
    w = torch.as_tensor(np.asarray(coarse_alphas, dtype=np.float64))[None]
    u = (torch.arange(n_fine, dtype=torch.float64) + torch.as_tensor(uniform_stream(seed, [0], n_fine, salt=2))) / n_fine
    fine = sample_pdf(t, d, w, u)
    merged, _ = torch.sort(torch.cat([t, fine], dim=-1), dim=-1)
    far = torch.tensor([coarse.t_far], dtype=torch.float64)
    return RaySamples(merged[0].numpy(), _deltas(merged, far)[0].numpy(), coarse.t_near, coarse.t_far)


# ---------------------------------------------------------------------------
# compositing
# ---------------------------------------------------------------------------

def _tensor(x) -> tuple[torch.Tensor, bool]:
    if isinstance(x, torch.Tensor):
        return x, True
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), False


def alpha_weights(sigmas, deltas, check: bool = True):
    """Alpha weights and residual transmittance along the last axis.

    Returns ``(alphas, residual)`` with ``alphas[i] = exp(-sum_{j<i} s_j d_j)
    (1 - exp(-s_i d_i))`` and ``residual = exp(-sum_j s_j d_j)``. Tensors in,
    tensors out; anything else is evaluated in float64 and returned as numpy.
    """
    s, is_t = _tensor(sigmas)
    d, _ = _tensor(deltas)
    if s.shape != d.shape:
        raise ValueError(f"sigmas {tuple(s.shape)} and deltas {tuple(d.shape)} differ in shape")
    if check:
        if torch.any(s < 0):
            raise ValueError("densities must be non-negative")
        if torch.any(d <= 0):
            raise ValueError("deltas must be positive")
    tau = s * d
    acc = torch.cumsum(tau, dim=-1)
    trans = torch.exp(-(acc - tau))
    alphas = trans * -torch.expm1(-tau)
    residual = torch.exp(-acc[..., -1])
    if is_t:
        return alphas, residual
    return alphas.numpy(), float(residual) if residual.ndim == 0 else residual.numpy()


@dataclass
class RayGaussian:
    mean: np.ndarray | torch.Tensor
    variance: np.ndarray | torch.Tensor | float
    weights: np.ndarray | torch.Tensor
    residual_transmittance: np.ndarray | torch.Tensor | float


def observation_variance(ray_var, residual, beta0_sq: float):
    """Variance of a ray treated as a noisy observation of its pixel.

    The composited variance gives the background zero variance, so a ray that
    hits nothing claims near-perfect certainty. Wherever a ray enters a
    likelihood (the training NLL, posterior updates, acquisition) the
    background instead counts as one more sample of minimum variance
    ``beta0_sq`` weighted by the residual transmittance.
    """
    return ray_var + beta0_sq * residual ** 2


def composite_mean_var(alphas, color_means, variances, residual=None, background=None) -> RayGaussian:
    """Gaussian ray color: mean ``sum a_i c_i`` (+ residual * background), variance ``sum a_i^2 var_i``.

    The background contributes to the mean only.
    """
    a, is_t = _tensor(alphas)
    c, _ = _tensor(color_means)
    v, _ = _tensor(variances)
    if c.shape[:-1] != a.shape or v.shape != a.shape:
        raise ValueError("alphas, color means and variances must have matching lengths")
    mean = (a[..., None] * c).sum(dim=-2)
    if residual is None:
        residual = 1.0 - a.sum(dim=-1)
    res, _ = _tensor(residual)
    if background is not None:
        bg, _ = _tensor(background)
        mean = mean + res[..., None] * bg.to(mean.dtype)
    var = (a * a * v).sum(dim=-1)
    if is_t:
        return RayGaussian(mean, var, a, res)
    return RayGaussian(mean.numpy(), float(var) if var.ndim == 0 else var.numpy(), a.numpy(),
                       float(res) if res.ndim == 0 else res.numpy())


# ---------------------------------------------------------------------------
# coarse + fine rendering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RenderConfig:
    n_coarse: int = 64
    n_fine: int = 128
    perturb: bool = True
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    chunk: int = 2048

    def __post_init__(self):
        if self.n_coarse < 1 or self.n_fine < 0:
            raise ValueError("need n_coarse >= 1 and n_fine >= 0")
        object.__setattr__(self, "background", tuple(float(b) for b in self.background))

    def with_(self, **kw) -> "RenderConfig":
        return RenderConfig(**{**self.__dict__, **kw})


@dataclass
class RenderOutput:
    """Per-ray results of a coarse + fine pass.

    ``t``, ``alphas``, ``colors``, ``variances``, ``sigmas`` and ``positions``
    describe the fine pass samples (merged coarse + fine depths).
    ``fine_var`` is ``None`` when the fine field has no variance head.
    """

    coarse_rgb: torch.Tensor
    coarse_sigmas: torch.Tensor
    fine_rgb: torch.Tensor
    fine_var: torch.Tensor | None
    t: torch.Tensor
    deltas: torch.Tensor
    alphas: torch.Tensor
    colors: torch.Tensor
    variances: torch.Tensor | None
    sigmas: torch.Tensor
    positions: torch.Tensor
    residual: torch.Tensor

    def fine_gaussian(self) -> RayGaussian:
        return RayGaussian(self.fine_rgb, self.fine_var, self.alphas, self.residual)


def _uniforms(rays: RayBatch, n: int, seed: int, salt: int, perturb: bool, dtype) -> torch.Tensor:
    if perturb:
        return torch.as_tensor(uniform_stream(seed, rays.ids, n, salt=salt), dtype=dtype)
    return torch.full((len(rays), n), 0.5, dtype=dtype)


def render_rays(coarse: RadianceField, fine: RadianceField, rays: RayBatch, config: RenderConfig,
                seed: int = 0) -> RenderOutput:
    """Render a batch of rays with both passes; differentiable w.r.t. both fields."""
    dtype = next(fine.parameters()).dtype
    rays = rays.to(dtype)
    bg = torch.as_tensor(config.background, dtype=dtype)
    n = len(rays)
    dirs = rays.directions

    u_c = _uniforms(rays, config.n_coarse, seed, 1, config.perturb, dtype)
    t_c = stratified_t(rays.near, rays.far, u_c)
    d_c = _deltas(t_c, rays.far)
    pts_c = rays.origins[:, None, :] + t_c[..., None] * dirs[:, None, :]
    out_c = coarse(pts_c.reshape(-1, 3), dirs[:, None, :].expand(-1, config.n_coarse, -1).reshape(-1, 3),
                   uncertainty=False, check_directions=False)
    sig_c = out_c.sigma.reshape(n, -1)
    a_c, res_c = alpha_weights(sig_c, d_c, check=False)
    coarse_rgb = (a_c[..., None] * out_c.color_mean.reshape(n, -1, 3)).sum(dim=1) + res_c[:, None] * bg

    if config.n_fine > 0:
        u_f = _uniforms(rays, config.n_fine, seed, 2, config.perturb, dtype)
        u_f = (torch.arange(config.n_fine, dtype=dtype) + u_f) / config.n_fine
        t_f = sample_pdf(t_c.detach(), d_c.detach(), a_c.detach(), u_f)
        t, _ = torch.sort(torch.cat([t_c.detach(), t_f], dim=-1), dim=-1)
    else:
        t = t_c.detach()
    d = _deltas(t, rays.far)
    m = t.shape[-1]
    pts = rays.origins[:, None, :] + t[..., None] * dirs[:, None, :]
    out_f = fine(pts.reshape(-1, 3), dirs[:, None, :].expand(-1, m, -1).reshape(-1, 3),
                 uncertainty=True, check_directions=False)
    sig = out_f.sigma.reshape(n, m)
    colors = out_f.color_mean.reshape(n, m, 3)
    variances = None if out_f.variance is None else out_f.variance.reshape(n, m)
    a, res = alpha_weights(sig, d, check=False)
    fine_rgb = (a[..., None] * colors).sum(dim=1) + res[:, None] * bg
    fine_var = None if variances is None else (a * a * variances).sum(dim=1)
    return RenderOutput(coarse_rgb, sig_c, fine_rgb, fine_var, t, d, a, colors, variances, sig, pts, res)


def render_ray(coarse: RadianceField, fine: RadianceField, ray: Ray, config: RenderConfig, seed: int = 0) -> dict:
    """Single-ray convenience wrapper returning numpy values and per-sample records."""
    with torch.no_grad():
        out = render_rays(coarse, fine, RayBatch.from_rays([ray]), config, seed)
    per_sample = [
        {
            "t": float(out.t[0, i]),
            "alpha": float(out.alphas[0, i]),
            "color_mean": out.colors[0, i].numpy().astype(np.float64),
            "variance": None if out.variances is None else float(out.variances[0, i]),
            "position": out.positions[0, i].numpy().astype(np.float64),
        }
        for i in range(out.t.shape[1])
    ]
    var = None if out.fine_var is None else float(out.fine_var[0])
    return {
        "coarse_color": out.coarse_rgb[0].numpy().astype(np.float64),
        "fine": RayGaussian(out.fine_rgb[0].numpy().astype(np.float64), var,
                            out.alphas[0].numpy().astype(np.float64), float(out.residual[0])),
        "per_sample": per_sample,
    }


@dataclass
class ImageRender:
    rgb: np.ndarray
    variance_map: np.ndarray | None
    coarse_rgb: np.ndarray


def render_image(coarse: RadianceField, fine: RadianceField, pose: CameraPose, config: RenderConfig,
                 seed: int = 0) -> ImageRender:
    dtype = next(fine.parameters()).dtype
    rays = camera_rays(pose, dtype=dtype)
    rgb, var, crgb = [], [], []
    with torch.no_grad():
        for s in range(0, len(rays), config.chunk):
            out = render_rays(coarse, fine, rays[s:s + config.chunk], config, seed)
            rgb.append(out.fine_rgb)
            crgb.append(out.coarse_rgb)
            if out.fine_var is not None:
                var.append(out.fine_var)
    h, w = pose.height, pose.width
    return ImageRender(
        torch.cat(rgb).numpy().astype(np.float64).reshape(h, w, 3),
        torch.cat(var).numpy().astype(np.float64).reshape(h, w) if var else None,
        torch.cat(crgb).numpy().astype(np.float64).reshape(h, w, 3),
    )
