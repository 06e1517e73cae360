"""Image quality and transmission statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

MAX_VALUE = 255.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03
LUMA = np.array([0.299, 0.587, 0.114])  # ITU-R BT.601


@dataclass(frozen=True)
class QualityReport:
    mse: float
    psnr_db: float
    ssim: float


@dataclass(frozen=True)
class WaitStats:
    t_avg_ms: float | None
    t_p999_ms: float | None
    incomplete_fraction: float


def _pixels(img) -> np.ndarray:
    return np.asarray(getattr(img, "pixels", img), dtype=np.float64)


def mse(reference, test) -> float:
    a, b = _pixels(reference), _pixels(test)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(value: float) -> float:
    return math.inf if value == 0 else 10.0 * math.log10(MAX_VALUE**2 / value)


def psnr(reference, test) -> float:
    """PSNR in dB over all three planes; identical images give ``math.inf``."""
    return psnr_from_mse(mse(reference, test))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def luma(img) -> np.ndarray:
    px = _pixels(img)
    return px if px.ndim == 2 else px @ LUMA


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation with the 1-D kernel ``g``."""
    rows = np.lib.stride_tricks.sliding_window_view(x, len(g), axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, len(g), axis=1) @ g


def ssim(reference, test) -> float:
    """Mean SSIM on luma with an 11x11 Gaussian window (sigma 1.5)."""
    x, y = luma(reference), luma(test)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    c1 = (K1 * MAX_VALUE) ** 2
    c2 = (K2 * MAX_VALUE) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def quality(reference, test) -> QualityReport:
    m = mse(reference, test)
    return QualityReport(m, psnr_from_mse(m), ssim(reference, test))


def throughput_mpps(records: Iterable, horizon_s: float) -> float:
    """Megapixels per second; each image counts once, at its first decode."""
    if not horizon_s > 0:
        raise ValueError("horizon_s must be positive")
    pixels = sum(r.width * r.height for r in records if r.first_decode_slot is not None)
    return pixels / horizon_s / 1e6


def nearest_rank_index(n: int, p_per_mille: int = 999) -> int:
    """Zero-based sorted index ceil(p * n), clamped to the last sample."""
    return min(-(-p_per_mille * n // 1000), n - 1)


def wait_stats(samples_ms: Sequence[float | None]) -> WaitStats:
    """Mean and 99.9th percentile over completed samples; ``None`` marks incomplete."""
    if len(samples_ms) == 0:
        raise ValueError("wait_stats needs at least one sample")
    done = sorted(float(s) for s in samples_ms if s is not None)
    frac = 1.0 - len(done) / len(samples_ms)
    if not done:
        return WaitStats(None, None, 1.0)
    return WaitStats(math.fsum(done) / len(done), done[nearest_rank_index(len(done))], frac)
