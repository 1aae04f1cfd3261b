"""Image quality metrics and the per-round CSV report."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio over all pixels and channels, capped at 99 dB."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(max_value ** 2 / mse), PSNR_CAP)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    # separable correlation, keeping only positions where the window fits
    half = win.size // 2
    out = correlate1d(img, win, axis=0, mode="constant")
    out = correlate1d(out, win, axis=1, mode="constant")
    return out[half:img.shape[0] - half, half:img.shape[1] - half]


def ssim(a, b, data_range: float = 1.0, k1: float = 0.01, k2: float = 0.03, win_size: int = 11,
         sigma: float = 1.5) -> float:
    """Mean structural similarity with a Gaussian window.

    Images are (H, W) or (H, W, C); the map is averaged over valid window
    positions and channels. Local variances use the unbiased estimate.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.ndim != 3:
        raise ValueError("ssim expects (H, W) or (H, W, C) images")
    if min(a.shape[:2]) < win_size:
        raise ValueError(f"image sides must be >= {win_size} for ssim")
    win = _gaussian_window(win_size, sigma)
    n = win_size * win_size
    cov_norm = n / (n - 1.0)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, win), _filter_valid(y, win)
        vx = cov_norm * (_filter_valid(x * x, win) - mx * mx)
        vy = cov_norm * (_filter_valid(y * y, win) - my * my)
        vxy = cov_norm * (_filter_valid(x * y, win) - mx * my)
        num = (2 * mx * my + c1) * (2 * vxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(np.mean(num / den))
    return float(np.clip(np.mean(vals), -1.0, 1.0))


@dataclass
class MetricRecord:
    round: int
    n_train_views: int
    psnr: float
    ssim: float
    mean_variance: float
    wall_time_s: float

    def __post_init__(self):
        if not math.isfinite(self.psnr):
            raise ValueError("psnr must be finite")
        if not -1.0 <= self.ssim <= 1.0:
            raise ValueError("ssim must lie in [-1, 1]")


REPORT_COLUMNS = tuple(f.name for f in fields(MetricRecord))
# metrics.csv leaves wall time out so repeated runs are byte-identical
DETERMINISTIC_COLUMNS = tuple(c for c in REPORT_COLUMNS if c != "wall_time_s")


def _fmt(value) -> str:
    # repr round-trips floats exactly
    return str(value) if isinstance(value, (int, np.integer)) else repr(float(value))


def write_report(records: Sequence[MetricRecord], path: str | Path,
                 columns: Sequence[str] = REPORT_COLUMNS) -> Path:
    """Write one CSV row per record, in the given order."""
    unknown = set(columns) - set(REPORT_COLUMNS)
    if unknown:
        raise ValueError(f"unknown report columns {sorted(unknown)}")
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in records:
            w.writerow([_fmt(getattr(r, c)) for c in columns])
    return path


def read_report(path: str | Path) -> list[MetricRecord]:
    """Parse a report; columns missing from the file default to NaN (or 0 for wall time)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        out.append(MetricRecord(
            round=int(row["round"]),
            n_train_views=int(row["n_train_views"]),
            psnr=float(row["psnr"]),
            ssim=float(row["ssim"]),
            mean_variance=float(row.get("mean_variance", "nan")),
            wall_time_s=float(row.get("wall_time_s", 0.0)),
        ))
    return out
