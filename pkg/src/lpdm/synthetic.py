"""Synthetic paired data for smoke runs and toy-scale checks.

Images are (3, H, W) float32 in [-1, 1]. Darkening applies a power curve in
the [0, 1] domain: ``u ** (1 / gamma)``, so gamma < 1 darkens.
"""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .training import PairedSample


def to_unit(x):
    return (x + 1.0) / 2.0


def from_unit(u):
    return u * 2.0 - 1.0


def darken(x: np.ndarray, gamma: float) -> np.ndarray:
    return from_unit(np.clip(to_unit(x), 0.0, 1.0) ** (1.0 / gamma)).astype(np.float32)


def smooth_image(rng: np.random.Generator, size: int, blur: float = 4.0) -> np.ndarray:
    """Blurred white noise, rescaled per image to roughly [-0.8, 0.8]."""
    x = np.stack([gaussian_filter(rng.standard_normal((size, size)), blur, mode="wrap") for _ in range(3)])
    x = x - x.mean()
    x = 0.8 * x / max(np.abs(x).max(), 1e-12)
    return x.astype(np.float32)


def pattern_image(index: int, size: int) -> np.ndarray:
    """Deterministic structured pattern: stripes, checkers and ramps in
    different colour channels."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    k = index + 1
    r = np.sin(2 * np.pi * k * xx)
    g = np.sign(np.sin(2 * np.pi * (k + 1) * xx) * np.sin(2 * np.pi * (k + 1) * yy))
    b = 2 * ((xx + k * yy) % 1.0) - 1
    return (0.7 * np.stack([r, g, b])).astype(np.float32)


def pattern_pairs(n: int, size: int, gamma: float = 0.3) -> list[PairedSample]:
    out = []
    for i in range(n):
        x0 = pattern_image(i, size)
        out.append(PairedSample(x0, darken(x0, gamma), f"pattern{i:03d}"))
    return out


def smooth_pairs(n: int, size: int, seed: int, gamma: float = 0.3, noise: float = 0.05) -> list[PairedSample]:
    """Smooth targets with gamma-darkened, Gaussian-noised conditioning images."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        x0 = smooth_image(rng, size)
        c = darken(x0, gamma) + noise * rng.standard_normal(x0.shape).astype(np.float32)
        out.append(PairedSample(x0, np.clip(c, -1, 1).astype(np.float32), f"smooth{i:03d}"))
    return out
