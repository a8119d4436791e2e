"""PSNR, SSIM and Dice."""

from __future__ import annotations

import math

import numpy as np
from scipy.signal import fftconvolve

PSNR_INF = math.inf


class MetricError(ValueError):
    pass


def _check_pair(x, ref):
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {ref.shape}")
    return x, ref


def psnr(x: np.ndarray, ref: np.ndarray) -> float:
    """PSNR in dB with the peak taken as the reference's value range."""
    x, ref = _check_pair(x, ref)
    peak = float(ref.max() - ref.min())
    if peak == 0:
        raise MetricError("reference image is constant; PSNR undefined")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0:
        return PSNR_INF
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(
    x: np.ndarray,
    ref: np.ndarray,
    data_range: float | None = None,
    win_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean SSIM over every fully-contained Gaussian window."""
    x, ref = _check_pair(x, ref)
    if min(x.shape) < win_size:
        raise MetricError(f"images smaller than the {win_size}x{win_size} window")
    if data_range is None:
        data_range = float(ref.max() - ref.min())
        if data_range == 0:
            data_range = max(float(np.abs(ref).max()), 1.0)
    w = gaussian_window(win_size, sigma)

    def filt(a):
        return fftconvolve(a, w, mode="valid")

    mu_x, mu_y = filt(x), filt(ref)
    sxx = filt(x * x) - mu_x**2
    syy = filt(ref * ref) - mu_y**2
    sxy = filt(x * ref) - mu_x * mu_y
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    for m in (a, b):
        if m.dtype != bool and not np.isin(m, (0, 1)).all():
            raise MetricError("dice expects binary masks")
    a = a.astype(bool)
    b = b.astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total
