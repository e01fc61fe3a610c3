"""Photometric quality metrics: PSNR and luma SSIM."""

from __future__ import annotations

import numpy as np
from scipy.signal import convolve2d

from .imaging import rgb_to_gray

PSNR_CAP = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_L = 1.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) over all channels, capped at 99 dB for identical
    images; inputs are expected in [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, float(10.0 * np.log10(1.0 / mse)))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM on the luma channel: 11x11 Gaussian window with
    sigma 1.5, K1 = 0.01, K2 = 0.03, L = 1, no padding (valid windows)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    x = rgb_to_gray(a) if a.ndim == 3 else a
    y = rgb_to_gray(b) if b.ndim == 3 else b
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)

    mu_x = convolve2d(x, win, mode="valid")
    mu_y = convolve2d(y, win, mode="valid")
    xx = convolve2d(x * x, win, mode="valid") - mu_x * mu_x
    yy = convolve2d(y * y, win, mode="valid") - mu_y * mu_y
    xy = convolve2d(x * y, win, mode="valid") - mu_x * mu_y

    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return float(np.mean(num / den))
