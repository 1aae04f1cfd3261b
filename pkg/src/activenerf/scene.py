"""Procedural scenes, camera poses and the ground-truth ray-marching renderer.

Scenes are unions of spheres and axis-aligned boxes with constant density.
Overlapping primitives add their densities and mix colors weighted by density,
so the field is defined everywhere. The oracle renderer integrates the volume
rendering equation with uniform midpoint quadrature and composites the
residual transmittance over a solid background.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

SHAPES = ("sphere", "box")
TEXTURES = ("constant", "gradient_x", "gradient_y", "gradient_z", "checker")

# Camera frame convention: x right, y up, the camera looks down its local -z.
WORLD_UP = np.array([0.0, 0.0, 1.0])


def _vec3(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64).reshape(-1)
    if arr.shape == (1,):
        arr = np.repeat(arr, 3)
    if arr.shape != (3,):
        raise ValueError(f"{name} must be a scalar or a 3-vector, got {value!r}")
    return arr


@dataclass(frozen=True, eq=False)
class Primitive:
    """A constant-density sphere or box.

    ``size`` is the radius for spheres and the half-extent (scalar or per
    axis) for boxes. ``texture`` selects a coordinate-dependent color that
    blends ``color`` into ``color2`` across the primitive.
    """

    shape: str
    center: np.ndarray
    size: np.ndarray
    density: float
    color: np.ndarray
    texture: str = "constant"
    color2: np.ndarray | None = None
    checker_scale: float = 4.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}; expected one of {TEXTURES}")
        object.__setattr__(self, "center", _vec3(self.center, "center"))
        size = _vec3(self.size, "size")
        if self.shape == "sphere" and not np.allclose(size, size[0]):
            raise ValueError("sphere size must be a scalar radius")
        if np.any(size <= 0):
            raise ValueError("primitive size must be positive")
        object.__setattr__(self, "size", size)
        if not self.density >= 0:
            raise ValueError("density must be >= 0")
        color = _vec3(self.color, "color")
        color2 = 1.0 - color if self.color2 is None else _vec3(self.color2, "color2")
        for c in (color, color2):
            if np.any(c < 0) or np.any(c > 1):
                raise ValueError("colors must lie in [0, 1]")
        object.__setattr__(self, "color", color)
        object.__setattr__(self, "color2", color2)

    @property
    def extent(self) -> float:
        """Distance from the center to the farthest point of the primitive."""
        if self.shape == "sphere":
            return float(self.size[0])
        return float(np.linalg.norm(self.size))

    def contains(self, points: np.ndarray) -> np.ndarray:
        rel = points - self.center
        if self.shape == "sphere":
            return np.einsum("...i,...i->...", rel, rel) <= self.size[0] ** 2
        return np.all(np.abs(rel) <= self.size, axis=-1)

    def color_at(self, points: np.ndarray) -> np.ndarray:
        shape = points.shape[:-1] + (3,)
        if self.texture == "constant":
            return np.broadcast_to(self.color, shape)
        rel = (points - self.center) / self.size
        if self.texture == "checker":
            cells = np.floor((rel + 1.0) * 0.5 * self.checker_scale).astype(np.int64)
            w = (cells.sum(axis=-1) % 2).astype(np.float64)
        else:
            axis = "xyz".index(self.texture[-1])
            w = np.clip(0.5 * rel[..., axis] + 0.5, 0.0, 1.0)
        w = w[..., None]
        return (1.0 - w) * self.color + w * self.color2

    def to_dict(self) -> dict:
        out = {
            "shape": self.shape,
            "center": self.center.tolist(),
            "size": float(self.size[0]) if np.allclose(self.size, self.size[0]) else self.size.tolist(),
            "density": float(self.density),
            "color": self.color.tolist(),
        }
        if self.texture != "constant":
            out["texture"] = self.texture
            out["color2"] = self.color2.tolist()
            if self.texture == "checker":
                out["checker_scale"] = float(self.checker_scale)
        return out


@dataclass(frozen=True, eq=False)
class Scene:
    primitives: tuple[Primitive, ...] = ()
    background_color: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bounding_radius: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        bg = _vec3(self.background_color, "background_color")
        if np.any(bg < 0) or np.any(bg > 1):
            raise ValueError("background_color must lie in [0, 1]")
        object.__setattr__(self, "background_color", bg)
        if not self.bounding_radius > 0:
            raise ValueError("bounding_radius must be positive")
        for p in self.primitives:
            if np.linalg.norm(p.center) + p.extent > self.bounding_radius + 1e-9:
                raise ValueError("bounding_radius does not enclose every primitive")

    def to_dict(self) -> dict:
        return {
            "background_color": self.background_color.tolist(),
            "bounding_radius": float(self.bounding_radius),
            "primitives": [p.to_dict() for p in self.primitives],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Scene":
        unknown = set(data) - {"background_color", "bounding_radius", "primitives"}
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        prims = [Primitive(**p) for p in data.get("primitives", [])]
        return cls(
            primitives=prims,
            background_color=data.get("background_color", [0.0, 0.0, 0.0]),
            bounding_radius=float(data.get("bounding_radius", 1.0)),
        )


def load_scene(path: str | Path) -> Scene:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    return Scene.from_dict(data)


def save_scene(scene: Scene, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(scene.to_dict(), fh, sort_keys=False)


def default_scene() -> Scene:
    """The toy scene used by the desk-scale experiments and tests.

    Differently colored and textured objects sit on every side of the origin
    so that views from different directions see different content.
    """
    return Scene(
        primitives=[
            Primitive("sphere", [0.0, 0.0, 0.0], 0.45, 30.0, [0.9, 0.3, 0.2], texture="gradient_z",
                      color2=[0.95, 0.85, 0.2]),
            Primitive("box", [0.7, 0.0, -0.1], [0.15, 0.3, 0.3], 30.0, [0.1, 0.4, 0.9], texture="checker",
                      color2=[0.9, 0.9, 0.9], checker_scale=3.0),
            Primitive("box", [-0.65, 0.25, 0.0], [0.2, 0.2, 0.35], 30.0, [0.2, 0.8, 0.3], texture="gradient_y",
                      color2=[0.1, 0.3, 0.1]),
            Primitive("sphere", [0.0, -0.7, 0.2], 0.22, 30.0, [0.8, 0.2, 0.8]),
            Primitive("sphere", [0.1, 0.6, 0.45], 0.18, 30.0, [0.95, 0.95, 0.3]),
            Primitive("box", [0.0, 0.0, -0.62], [0.5, 0.5, 0.06], 30.0, [0.6, 0.6, 0.6], texture="checker",
                      color2=[0.25, 0.25, 0.25], checker_scale=4.0),
        ],
        background_color=[0.0, 0.0, 0.0],
        bounding_radius=1.4,
    )


def random_scene(seed: int, n_primitives: int = 5, bounding_radius: float = 1.4) -> Scene:
    """Random spheres and boxes with random colors and textures, all inside ``bounding_radius``."""
    if n_primitives < 0:
        raise ValueError("n_primitives must be >= 0")
    rng = np.random.default_rng(seed)
    textures = ("constant", "gradient_x", "gradient_y", "gradient_z", "checker")
    prims = []
    for _ in range(n_primitives):
        shape = "sphere" if rng.random() < 0.5 else "box"
        size = float(rng.uniform(0.12, 0.35)) if shape == "sphere" else rng.uniform(0.08, 0.3, size=3)
        extent = float(np.linalg.norm(size)) if shape == "box" else size
        # place the center so the whole primitive stays inside the bound
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        center = direction * rng.uniform(0.0, max(bounding_radius - extent, 0.0) * 0.9)
        prims.append(Primitive(shape, center, size, 30.0, rng.uniform(0.1, 1.0, size=3),
                               texture=str(rng.choice(textures)), checker_scale=4.0))
    return Scene(prims, [0.0, 0.0, 0.0], bounding_radius)


def query_scene(scene: Scene, points) -> tuple:
    """Density and color of the analytic field at one point or an (..., 3) array.

    Returns ``(sigma, color)``; outside every primitive that is
    ``(0, background_color)``.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    sigma = np.zeros(pts.shape[:-1])
    weighted = np.zeros(pts.shape[:-1] + (3,))
    for prim in scene.primitives:
        inside = prim.contains(pts)
        if not inside.any() or prim.density == 0:
            continue
        sigma = sigma + np.where(inside, prim.density, 0.0)
        weighted = weighted + np.where(inside[..., None], prim.density * prim.color_at(pts), 0.0)
    occupied = sigma > 0
    color = np.where(
        occupied[..., None],
        weighted / np.where(occupied, sigma, 1.0)[..., None],
        scene.background_color,
    )
    if single:
        return float(sigma[0]), color[0]
    return sigma, color


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Pinhole camera: world position, camera-to-world rotation and intrinsics."""

    position: np.ndarray
    rotation: np.ndarray
    focal_length: float
    width: int
    height: int
    t_near: float
    t_far: float

    def __post_init__(self):
        object.__setattr__(self, "position", _vec3(self.position, "position"))
        rot = np.asarray(self.rotation, dtype=np.float64)
        if rot.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6) or abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", rot)
        if not 0 < self.t_near < self.t_far:
            raise ValueError("need 0 < t_near < t_far")
        if self.width < 1 or self.height < 1:
            raise ValueError("width and height must be >= 1")
        if not self.focal_length > 0:
            raise ValueError("focal_length must be positive")

    @property
    def forward(self) -> np.ndarray:
        return -self.rotation[:, 2]

    def c2w(self) -> np.ndarray:
        """4x4 camera-to-world matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.position
        return m

    def pixel_directions(self, px: np.ndarray, py: np.ndarray) -> np.ndarray:
        """Unit world-space directions through the centers of pixels ``(px, py)``."""
        x = (np.asarray(px, dtype=np.float64) + 0.5 - 0.5 * self.width) / self.focal_length
        y = -(np.asarray(py, dtype=np.float64) + 0.5 - 0.5 * self.height) / self.focal_length
        cam = np.stack([x, y, -np.ones_like(x)], axis=-1)
        world = cam @ self.rotation.T
        return world / np.linalg.norm(world, axis=-1, keepdims=True)

    def to_dict(self) -> dict:
        return {
            "position": self.position.tolist(),
            "rotation": self.rotation.tolist(),
            "focal_length": float(self.focal_length),
            "width": int(self.width),
            "height": int(self.height),
            "t_near": float(self.t_near),
            "t_far": float(self.t_far),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CameraPose":
        return cls(**data)


@dataclass(frozen=True, eq=False)
class PosedImage:
    pose: CameraPose
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.shape != (self.pose.height, self.pose.width, 3):
            raise ValueError(
                f"pixel array {px.shape} does not match pose {self.pose.height}x{self.pose.width}x3"
            )
        object.__setattr__(self, "pixels", px)


def look_at(position, target, *, focal_length: float, width: int, height: int,
            t_near: float, t_far: float, up=WORLD_UP) -> CameraPose:
    position = _vec3(position, "position")
    forward = _vec3(target, "target") - position
    forward /= np.linalg.norm(forward)
    back = -forward
    up = _vec3(up, "up")
    right = np.cross(up, back)
    if np.linalg.norm(right) < 1e-8:
        # looking straight along the up axis
        right = np.cross(np.array([0.0, 1.0, 0.0]), back)
    right /= np.linalg.norm(right)
    true_up = np.cross(back, right)
    rotation = np.stack([right, true_up, back], axis=1)
    return CameraPose(position, rotation, focal_length, width, height, t_near, t_far)


def focal_from_fov(width: int, fov_degrees: float) -> float:
    return 0.5 * width / math.tan(0.5 * math.radians(fov_degrees))


def sample_sphere_views(
    n: int,
    radius: float,
    center: Sequence[float] = (0.0, 0.0, 0.0),
    hemisphere: bool = False,
    seed: int = 0,
    *,
    width: int = 64,
    height: int = 64,
    fov_degrees: float = 40.0,
    t_near: float | None = None,
    t_far: float | None = None,
) -> list[CameraPose]:
    """Fibonacci-lattice cameras on a sphere, each looking at ``center``.

    The seed only rotates the lattice about the up axis, so every seed gives
    the same even coverage. ``hemisphere`` restricts cameras to z > center.
    Near/far default to ``radius * 0.4`` and ``radius * 1.6``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not radius > 0:
        raise ValueError("radius must be positive")
    center = _vec3(center, "center")
    offset = np.random.default_rng(seed).uniform(0.0, 2.0 * math.pi)
    golden = math.pi * (3.0 - math.sqrt(5.0))
    i = np.arange(n) + 0.5
    z = 1.0 - i / n if hemisphere else 1.0 - 2.0 * i / n
    rho = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = offset + golden * np.arange(n)
    dirs = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=-1)
    focal = focal_from_fov(width, fov_degrees)
    near = 0.4 * radius if t_near is None else t_near
    far = 1.6 * radius if t_far is None else t_far
    return [
        look_at(center + radius * d, center, focal_length=focal, width=width, height=height,
                t_near=near, t_far=far)
        for d in dirs
    ]


def oracle_render(scene: Scene, pose: CameraPose, steps: int = 256, chunk: int = 4096) -> PosedImage:
    """Ground-truth image by uniform midpoint quadrature of the volume integral."""
    if steps < 64:
        raise ValueError("oracle_render needs steps >= 64")
    h, w = pose.height, pose.width
    py, px = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dirs = pose.pixel_directions(px.reshape(-1), py.reshape(-1))
    delta = (pose.t_far - pose.t_near) / steps
    t = pose.t_near + (np.arange(steps) + 0.5) * delta
    out = np.empty((dirs.shape[0], 3))
    for start in range(0, dirs.shape[0], chunk):
        d = dirs[start:start + chunk]
        pts = pose.position + d[:, None, :] * t[None, :, None]
        sigma, color = query_scene(scene, pts.reshape(-1, 3))
        sigma = sigma.reshape(d.shape[0], steps)
        color = color.reshape(d.shape[0], steps, 3)
        tau = sigma * delta
        acc = np.cumsum(tau, axis=1)
        trans = np.exp(-(acc - tau))
        weights = trans * -np.expm1(-tau)
        residual = np.exp(-acc[:, -1])
        out[start:start + chunk] = (weights[..., None] * color).sum(axis=1) + residual[:, None] * scene.background_color
    return PosedImage(pose, np.clip(out, 0.0, 1.0).reshape(h, w, 3))


def generate_dataset(scene: Scene, poses: Sequence[CameraPose], steps: int = 256) -> list[PosedImage]:
    return [oracle_render(scene, p, steps) for p in poses]
