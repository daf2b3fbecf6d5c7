"""Illumination-weighted luma denoising, the comparison baseline.

``R_f = R * T + R_d * (1 - T)`` where ``R_d`` is ``R`` with only its Y
(luma) channel passed through a denoiser. Bright regions (T near 1) keep the
original pixels; dark regions take the denoised ones.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.ndimage import gaussian_filter

# BT.601, full range, no offsets
RGB_TO_YUV = np.array([
    [0.299, 0.587, 0.114],
    [-0.168735892, -0.331264108, 0.5],
    [0.5, -0.418687589, -0.081312411],
])
YUV_TO_RGB = np.linalg.inv(RGB_TO_YUV)

# (luma in [0, 1], strength in 8-bit units) -> denoised luma
DenoiserPlugin = Callable[[np.ndarray, float], np.ndarray]


def _check_rgb(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {x.shape}")
    return x


def rgb_to_yuv(x) -> np.ndarray:
    x = _check_rgb(x)
    return np.einsum("ij,jhw->ihw", RGB_TO_YUV, x.astype(np.float64)).astype(x.dtype)


def yuv_to_rgb(x) -> np.ndarray:
    x = _check_rgb(x)
    return np.einsum("ij,jhw->ihw", YUV_TO_RGB, x.astype(np.float64)).astype(x.dtype)


def identity_denoiser(luma: np.ndarray, strength: float) -> np.ndarray:
    return luma


def gaussian_denoiser(luma: np.ndarray, strength: float) -> np.ndarray:
    """Separable Gaussian blur with sigma = strength / 10 pixels."""
    sigma = strength / 10.0
    if sigma <= 0:
        return luma
    return gaussian_filter(luma, sigma=sigma, mode="reflect")


PLUGINS: dict[str, DenoiserPlugin] = {"identity": identity_denoiser, "gaussian": gaussian_denoiser}


def illumination_weighted_denoise(R, T_map, denoiser: DenoiserPlugin = gaussian_denoiser,
                                  strength: float = 15.0) -> np.ndarray:
    """Blend ``R`` (a (3, H, W) image in [-1, 1]) with its luma-denoised version
    according to the illumination map ``T_map`` ((H, W) in [0, 1])."""
    R = _check_rgb(R)
    T_map = np.asarray(T_map)
    if T_map.shape != R.shape[1:]:
        raise ValueError(f"illumination map {T_map.shape} does not match image {R.shape[1:]}")
    if strength < 0:
        raise ValueError("strength must be non-negative")
    if T_map.min() < 0 or T_map.max() > 1:
        raise ValueError("illumination map values must lie in [0, 1]")

    R_d = yuv_to_rgb(denoise_luma(R, denoiser, strength))
    T = T_map.astype(np.float64)[None]
    R_f = R * T + R_d * (1.0 - T)
    return R_f.astype(R.dtype)


def denoise_luma(R, denoiser: DenoiserPlugin, strength: float) -> np.ndarray:
    """YUV image of ``R`` with only Y replaced by its denoised version (float64).

    The plugin sees luma rescaled to [0, 1].
    """
    yuv = rgb_to_yuv(np.asarray(R, dtype=np.float64))
    luma01 = (yuv[0] + 1.0) / 2.0
    den = np.asarray(denoiser(luma01, strength), dtype=np.float64)
    if den.shape != luma01.shape:
        raise ValueError(f"denoiser returned shape {den.shape}, expected {luma01.shape}")
    if not np.all(np.isfinite(den)):
        raise ValueError("denoiser returned non-finite values")
    yuv[0] = den * 2.0 - 1.0
    return yuv
