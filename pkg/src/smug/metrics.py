"""PSNR and SSIM on magnitude images."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _magnitudes(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.abs(np.asarray(a))
    b = np.abs(np.asarray(b))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a.astype(np.float64), b.astype(np.float64)


def psnr(a, b, data_range: float) -> float:
    """10 log10(range^2 / MSE) of |a| vs |b|; identical images give +inf."""
    if data_range <= 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    a, b = _magnitudes(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    half = len(g) // 2
    out = correlate1d(img, g, axis=0, mode="constant")
    out = correlate1d(out, g, axis=1, mode="constant")
    return out[half:img.shape[0] - half, half:img.shape[1] - half]


def ssim_map(a, b, data_range: float) -> np.ndarray:
    a, b = _magnitudes(a, b)
    if a.ndim != 2:
        raise ValueError(f"ssim expects 2-D images, got shape {a.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    s_aa = _filter_valid(a * a, g) - mu_a * mu_a
    s_bb = _filter_valid(b * b, g) - mu_b * mu_b
    s_ab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (s_aa + s_bb + c2)
    return num / den


def ssim(a, b, data_range: float) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian windows (sigma 1.5, K1 0.01, K2 0.03)."""
    if data_range <= 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    return float(np.mean(ssim_map(a, b, data_range)))


def image_metrics(recon: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    """(PSNR, SSIM) with data range = max |target|."""
    rng = float(np.max(np.abs(target)))
    return psnr(recon, target, rng), ssim(recon, target, rng)
