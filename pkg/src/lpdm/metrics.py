"""Full-reference metrics: PSNR, SSIM and MAE.

Inputs are (C, H, W) images in [-1, 1]; every metric first maps them to
[0, 1] and treats the data range as 1.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .images import ImageDecodeError, list_images, read_image

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _unit(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return (a + 1.0) / 2.0, (b + 1.0) / 2.0


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB over all channels and pixels; +inf
    for identical images."""
    a, b = _unit(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def mae(a, b) -> float:
    a, b = _unit(a, b)
    return float(np.mean(np.abs(a - b)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable correlation of a 2-D array with ``g``, valid region only."""
    x = sliding_window_view(x, g.size, axis=1) @ g
    return sliding_window_view(x, g.size, axis=0) @ g


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """SSIM map of two single-channel [0, 1] images over valid window positions."""
    g = gaussian_window()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim(a, b) -> float:
    """Gaussian-window SSIM, averaged over channels."""
    a, b = _unit(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[-2:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    return float(np.mean([ssim_map(a[ch], b[ch]).mean() for ch in range(a.shape[0])]))


@dataclass
class MetricReport:
    per_image: list[tuple[str, float, float, float]] = field(default_factory=list)
    problems: list[str] = field(default_factory=list)

    @property
    def aggregate(self) -> dict[str, float]:
        if not self.per_image:
            return {"psnr_db": math.nan, "ssim": math.nan, "mae": math.nan}
        finite = [r[1] for r in self.per_image if math.isfinite(r[1])]
        return {
            "psnr_db": float(np.mean(finite)) if finite else math.inf,
            "ssim": float(np.mean([r[2] for r in self.per_image])),
            "mae": float(np.mean([r[3] for r in self.per_image])),
        }

    def write_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["filename", "psnr_db", "ssim", "mae"])
            for row in self.per_image:
                w.writerow([row[0], *(repr(v) for v in row[1:])])
            agg = self.aggregate
            w.writerow(["__mean__", repr(agg["psnr_db"]), repr(agg["ssim"]), repr(agg["mae"])])

    def table(self) -> str:
        lines = [f"{'filename':<32} {'PSNR(dB)':>9} {'SSIM':>7} {'MAE':>7}"]
        for name, p, s, m in self.per_image:
            lines.append(f"{name:<32} {p:>9.3f} {s:>7.4f} {m:>7.4f}")
        agg = self.aggregate
        lines.append(f"{'__mean__':<32} {agg['psnr_db']:>9.3f} {agg['ssim']:>7.4f} {agg['mae']:>7.4f}")
        return "\n".join(lines)


def _score(name: str, result_path, truth_path):
    a, b = read_image(result_path), read_image(truth_path)
    if a.shape != b.shape:
        raise ValueError(f"{result_path} is {a.shape[1:]}, {truth_path} is {b.shape[1:]}")
    return name, psnr(a, b), ssim(a, b), mae(a, b)


def evaluate_dirs(results_dir, truth_dir, threads: int = 1) -> MetricReport:
    """Score every same-named pair of images. Unmatched and undecodable files
    are recorded in ``report.problems`` and skipped."""
    results, truths = list_images(results_dir), list_images(truth_dir)
    report = MetricReport()
    for name in sorted(set(results) ^ set(truths)):
        where = results_dir if name in results else truth_dir
        report.problems.append(f"unmatched: {name} (only in {where})")
    names = sorted(set(results) & set(truths))
    if not names:
        report.problems.append(f"no matching filenames between {results_dir} and {truth_dir}")

    def job(name):
        try:
            return _score(name, results[name], truths[name])
        except (ImageDecodeError, ValueError) as e:
            return e

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            outcomes = list(pool.map(job, names))
    else:
        outcomes = [job(n) for n in names]
    for name, out in zip(names, outcomes):
        if isinstance(out, Exception):
            report.problems.append(f"failed: {name}: {out}")
        else:
            report.per_image.append(out)
    if any(not math.isfinite(r[1]) for r in report.per_image):
        log.warning("identical image pairs have infinite PSNR and are excluded from the PSNR mean")
    return report
