"""PNG and raw float image files.

Raw dumps are a 16-byte header followed by little-endian float32 samples in
row-major (height, width, channels) order::

    offset  size  field
    0       4     magic  b"ANRW"
    4       4     width     uint32 LE
    8       4     height    uint32 LE
    12      4     channels  uint32 LE
    16      ...   data      float32 LE
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

RAW_MAGIC = b"ANRW"
_RAW_HEADER = struct.Struct("<4sIII")


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path: str | Path, image: np.ndarray) -> None:
    """Write an (H, W, 3) or (H, W) float image in [0, 1] as 8-bit PNG."""
    Image.fromarray(to_uint8(np.asarray(image))).save(path, format="PNG")


def read_png(path: str | Path, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Read a PNG as float RGB in [0, 1]; alpha is composited over ``background``."""
    img = Image.open(path)
    if img.mode in ("RGBA", "LA"):
        arr = np.asarray(img.convert("RGBA"), dtype=np.float64) / 255.0
        alpha = arr[..., 3:]
        return arr[..., :3] * alpha + np.asarray(background) * (1.0 - alpha)
    return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def write_raw(path: str | Path, image: np.ndarray) -> None:
    arr = np.asarray(image, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ValueError("raw dumps hold (H, W) or (H, W, C) arrays")
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(_RAW_HEADER.pack(RAW_MAGIC, w, h, c))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_raw(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, w, h, c = _RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise ValueError(f"{path}: not a raw image dump")
    arr = np.frombuffer(data, dtype="<f4", offset=_RAW_HEADER.size)
    if arr.size != w * h * c:
        raise ValueError(f"{path}: truncated raw image dump")
    return arr.reshape(h, w, c).astype(np.float32)


def write_variance_map(stem: str | Path, variance: np.ndarray) -> tuple[float, float]:
    """Write ``<stem>.raw``, a min-max normalized ``<stem>.png`` and ``<stem>.txt``.

    The sidecar text file records the normalization range as ``min`` and
    ``max`` lines so the PNG can be mapped back to variance units.
    """
    stem = Path(stem)
    var = np.asarray(variance, dtype=np.float64)
    lo, hi = float(var.min()), float(var.max())
    span = hi - lo
    norm = (var - lo) / span if span > 0 else np.zeros_like(var)
    write_raw(stem.with_suffix(".raw"), var)
    write_png(stem.with_suffix(".png"), norm)
    stem.with_suffix(".txt").write_text(f"min {lo!r}\nmax {hi!r}\n")
    return lo, hi
