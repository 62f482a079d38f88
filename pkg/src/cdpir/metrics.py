"""Image quality metrics: PSNR and windowed SSIM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve


@dataclass(frozen=True)
class MetricResult:
    psnr_db: float
    ssim: float
    data_range: float


def psnr(x: np.ndarray, ref: np.ndarray, data_range: float) -> float:
    """20*log10(data_range) - 10*log10(MSE); +inf when the images match."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return float("inf")
    return 20.0 * np.log10(data_range) - 10.0 * np.log10(mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(x: np.ndarray, ref: np.ndarray, data_range: float) -> float:
    """Mean local SSIM with the canonical 11x11 Gaussian window, sigma=1.5."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    if min(x.shape) < 11:
        raise ValueError("images must be at least 11x11 for windowed SSIM")
    if data_range <= 0:
        raise ValueError("data_range must be positive")

    win = _gaussian_window()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def filt(a):
        return convolve(a, win, mode="reflect")

    mu_x = filt(x)
    mu_y = filt(ref)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    var_x = filt(x * x) - mu_xx
    var_y = filt(ref * ref) - mu_yy
    cov = filt(x * ref) - mu_xy

    num = (2 * mu_xy + c1) * (2 * cov + c2)
    den = (mu_xx + mu_yy + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def evaluate(x: np.ndarray, ref: np.ndarray, data_range: float | None = None) -> MetricResult:
    """PSNR and SSIM for one image pair; data_range defaults to ref max - min."""
    if data_range is None:
        data_range = float(np.max(ref) - np.min(ref))
        if data_range == 0:
            data_range = 1.0
    return MetricResult(
        psnr_db=psnr(x, ref, data_range),
        ssim=ssim(x, ref, data_range),
        data_range=data_range,
    )
