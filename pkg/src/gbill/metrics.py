"""PSNR and SSIM for float RGB images in [0, 1].

SSIM follows Wang et al. (2004): 11x11 Gaussian window with standard
deviation 1.5, K1=0.01, K2=0.03, data range 1, evaluated on the valid
region only (no padding) and averaged over channels.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0
WINDOW = 11
WINDOW_STD = 1.5
K1, K2 = 0.01, 0.03
C1 = K1 ** 2
C2 = K2 ** 2


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _check_pair(a, b)
    mse = float(np.mean((np.clip(a, 0, 1) - np.clip(b, 0, 1)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def _window() -> np.ndarray:
    x = np.arange(WINDOW) - WINDOW // 2
    w = np.exp(-0.5 * (x / WINDOW_STD) ** 2)
    return w / w.sum()


def _filter_valid(x: np.ndarray) -> np.ndarray:
    w = _window()
    r = WINDOW // 2
    y = correlate1d(x, w, axis=0, mode="constant")
    y = correlate1d(y, w, axis=1, mode="constant")
    return y[r:-r, r:-r]


def _filter_valid_transpose(g: np.ndarray, shape) -> np.ndarray:
    r = WINDOW // 2
    full = np.zeros(shape)
    full[r:-r, r:-r] = g
    w = _window()
    full = correlate1d(full, w, axis=0, mode="constant")
    return correlate1d(full, w, axis=1, mode="constant")


def _as_hwc(a: np.ndarray) -> np.ndarray:
    return a[..., None] if a.ndim == 2 else a


def _ssim_terms(a, b):
    mu_a = _filter_valid(a)
    mu_b = _filter_valid(b)
    e_aa = _filter_valid(a * a)
    e_bb = _filter_valid(b * b)
    e_ab = _filter_valid(a * b)
    var_a = e_aa - mu_a ** 2
    var_b = e_bb - mu_b ** 2
    cov = e_ab - mu_a * mu_b
    num1 = 2 * mu_a * mu_b + C1
    num2 = 2 * cov + C2
    den1 = mu_a ** 2 + mu_b ** 2 + C1
    den2 = var_a + var_b + C2
    return mu_a, mu_b, num1, num2, den1, den2


def ssim(a, b) -> float:
    a, b = _check_pair(a, b)
    a, b = _as_hwc(a), _as_hwc(b)
    if min(a.shape[:2]) < WINDOW:
        raise ValueError(f"SSIM needs images of at least {WINDOW}x{WINDOW}, got {a.shape[:2]}")
    scores = []
    for ch in range(a.shape[2]):
        _, _, num1, num2, den1, den2 = _ssim_terms(a[..., ch], b[..., ch])
        scores.append(np.mean((num1 * num2) / (den1 * den2)))
    return float(np.mean(scores))


def ssim_with_grad(a, b) -> tuple[float, np.ndarray]:
    """SSIM and its gradient with respect to the first image."""
    a, b = _check_pair(a, b)
    squeeze = a.ndim == 2
    a, b = _as_hwc(a), _as_hwc(b)
    if min(a.shape[:2]) < WINDOW:
        raise ValueError(f"SSIM needs images of at least {WINDOW}x{WINDOW}, got {a.shape[:2]}")
    channels = a.shape[2]
    grad = np.empty_like(a)
    scores = []
    for ch in range(channels):
        x, y = a[..., ch], b[..., ch]
        mu_a, mu_b, num1, num2, den1, den2 = _ssim_terms(x, y)
        den = den1 * den2
        s = num1 * num2 / den
        scores.append(np.mean(s))
        weight = 1.0 / (s.size * channels)
        d_num1 = num2 / den * weight
        d_num2 = num1 / den * weight
        d_den1 = -s / den1 * weight
        d_den2 = -s / den2 * weight
        # num1 = 2 mu_a mu_b + C1; num2 = 2 (e_ab - mu_a mu_b) + C2
        # den1 = mu_a^2 + mu_b^2 + C1; den2 = e_aa - mu_a^2 + e_bb - mu_b^2 + C2
        g_mu = 2 * mu_b * (d_num1 - d_num2) + 2 * mu_a * (d_den1 - d_den2)
        g_eab = 2 * d_num2
        g_eaa = d_den2
        grad[..., ch] = (_filter_valid_transpose(g_mu, x.shape)
                         + 2 * x * _filter_valid_transpose(g_eaa, x.shape)
                         + y * _filter_valid_transpose(g_eab, x.shape))
    value = float(np.mean(scores))
    return value, (grad[..., 0] if squeeze else grad)
