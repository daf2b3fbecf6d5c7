"""Diffusion schedule arithmetic: forward sampling, x0 recovery and the
post-processing correction.

Timesteps are 1-based (1..T). ``alpha_bars`` carries an extra leading entry
for t = 0 equal to 1, so that t = 0 is a legal "no-op" index for the
correction operator.

All constants are held in float64; the image-valued helpers accept numpy
arrays or torch tensors and keep the input dtype.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

SCHEDULE_MODES = ("linear", "scaled_linear")


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    beta_start: float
    beta_end: float
    mode: str = "linear"
    betas: np.ndarray = field(init=False, repr=False, compare=False)
    alphas: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bars: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        T, lo, hi = self.T, self.beta_start, self.beta_end
        if isinstance(T, bool) or not isinstance(T, (int, np.integer)) or T < 1:
            raise ValueError(f"T must be a positive integer, got {T!r}")
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise ValueError("beta endpoints must be finite")
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError(f"need 0 < beta_start <= beta_end < 1, got [{lo}, {hi}]")
        if self.mode not in SCHEDULE_MODES:
            raise ValueError(f"unknown schedule mode {self.mode!r}")

        if self.mode == "linear":
            betas = np.linspace(lo, hi, T, dtype=np.float64)
        else:
            betas = np.linspace(math.sqrt(lo), math.sqrt(hi), T, dtype=np.float64) ** 2
        alphas = 1.0 - betas
        alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
        for name, arr in (("betas", betas), ("alphas", alphas), ("alpha_bars", alpha_bars)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def beta(self, t: int) -> float:
        self._check_t(t, low=1)
        return float(self.betas[t - 1])

    def alpha_bar(self, t: int) -> float:
        self._check_t(t, low=0)
        return float(self.alpha_bars[t])

    def _check_t(self, t, low: int) -> None:
        if not low <= int(t) <= self.T:
            raise ValueError(f"timestep {t} outside [{low}, {self.T}]")

    def table(self) -> list[tuple[int, float, float]]:
        """Rows of (t, beta_t, alpha_bar_t) for t = 1..T."""
        return [(t, float(self.betas[t - 1]), float(self.alpha_bars[t])) for t in range(1, self.T + 1)]


def build_linear_schedule(T: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012,
                          mode: str = "linear") -> DiffusionSchedule:
    """Linear variance schedule.

    ``mode="linear"`` interpolates beta itself; ``mode="scaled_linear"``
    interpolates sqrt(beta) and squares the result.
    """
    return DiffusionSchedule(T, float(beta_start), float(beta_end), mode)


def _coef(schedule: DiffusionSchedule, t, like, low: int):
    """Gather alpha_bar_t for a scalar or per-sample t, shaped to broadcast
    against ``like`` (batch-first when t is a vector)."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if t.ndim != 1 or t.shape[0] != like.shape[0]:
            raise ValueError(f"per-sample timesteps of shape {tuple(t.shape)} do not match batch {like.shape[0]}")
        idx = t.detach().cpu().long().numpy()
        if idx.min() < low or idx.max() > schedule.T:
            raise ValueError(f"timesteps outside [{low}, {schedule.T}]")
        ab = torch.as_tensor(schedule.alpha_bars[idx], dtype=like.dtype, device=like.device)
        return ab.reshape(-1, *([1] * (like.ndim - 1)))
    if isinstance(t, np.ndarray) and t.ndim > 0:
        raise TypeError("vector timesteps must be passed as a torch tensor")
    t = int(t)
    schedule._check_t(t, low)
    return float(schedule.alpha_bars[t])


def _sqrt(v):
    return torch.sqrt(v) if isinstance(v, torch.Tensor) else math.sqrt(v)


def _check_shapes(a, b, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(schedule: DiffusionSchedule, x0, t, eps):
    """Noise ``x0`` directly to timestep ``t``: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    _check_shapes(x0, eps, "q_sample")
    ab = _coef(schedule, t, x0, low=1)
    return _sqrt(ab) * x0 + _sqrt(1.0 - ab) * eps


def estimate_x0(schedule: DiffusionSchedule, xt, eps_hat, t):
    """Invert q_sample given a noise estimate."""
    _check_shapes(xt, eps_hat, "estimate_x0")
    ab = _coef(schedule, t, xt, low=1)
    return xt / _sqrt(ab) - _sqrt(1.0 / ab - 1.0) * eps_hat


def correct(schedule: DiffusionSchedule, x_eta, n_phi, s):
    """Subtract a detected noise map from an enhanced image using the
    schedule coefficients at ``s``. ``s = 0`` is the identity.

    The result is not clamped; callers clamp before encoding to pixels.
    """
    _check_shapes(x_eta, n_phi, "correct")
    ab = _coef(schedule, s, x_eta, low=0)
    if not isinstance(ab, torch.Tensor) and ab == 1.0:
        return x_eta.clone() if isinstance(x_eta, torch.Tensor) else np.array(x_eta, copy=True)
    return x_eta / _sqrt(ab) - _sqrt(1.0 / ab - 1.0) * n_phi


def subtraction_coefficient(schedule: DiffusionSchedule, s: int) -> float:
    """sqrt(1/ab_s - 1): how much of the noise map is removed at ``s``."""
    return math.sqrt(1.0 / schedule.alpha_bar(s) - 1.0)
