"""One-pass post-processing of enhanced low-light images.

The trained noise predictor is shown the enhanced image as if it were a
noisy sample at timestep ``phi`` (no noise is actually added) together with
the original low-light image. Its output is treated as the degradation
present in the enhanced image and removed with the schedule coefficients at
a smaller timestep ``s``.
"""
from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .images import list_images, read_image, write_image
from .schedule import DiffusionSchedule, correct
from .training import VARIANTS, model_input

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PostprocessConfig:
    phi: int = 300
    s: int = 30
    variant: str = "LPDM"

    def validate(self, T: int) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "DLPDM":
            return
        if not 0 < self.phi <= T:
            raise ValueError(f"phi={self.phi} outside (0, {T}]")
        if not 0 <= self.s < self.phi:
            raise ValueError(f"need 0 <= s < phi, got s={self.s}, phi={self.phi}")
        if self.s > self.phi / 2:
            warnings.warn(f"s={self.s} is more than half of phi={self.phi}; expect over-correction",
                          stacklevel=3)


def _expected_in_channels(variant: str) -> int:
    return 3 if variant == "ULPDM" else 6


def check_variant(model: nn.Module, variant: str) -> None:
    want = _expected_in_channels(variant)
    have = model.config.in_channels if hasattr(model, "config") else want
    if have != want:
        raise ValueError(f"variant {variant} needs a {want}-channel model, checkpoint has {have}")


def _batched(x) -> tuple[torch.Tensor, bool]:
    x = torch.as_tensor(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"expected (C, H, W) or (B, C, H, W), got {tuple(x.shape)}")
    return x, False


@torch.no_grad()
def estimate_noise(model: nn.Module, x_eta, c, phi: int, variant: str = "LPDM") -> torch.Tensor:
    """Noise map detected in ``x_eta`` at timestep ``phi``, in a single forward pass."""
    x, single = _batched(x_eta)
    if variant != "ULPDM":
        cb, _ = _batched(c)
        if tuple(cb.shape) != tuple(x.shape):
            raise ValueError(f"enhanced image {tuple(x.shape)} and conditioning {tuple(cb.shape)} differ")
    else:
        cb = None
    if x.shape[1] != 3:
        raise ValueError(f"expected 3-channel images, got {x.shape[1]}")
    dtype = next((p.dtype for p in model.parameters()), torch.float32)
    x = x.to(dtype)
    inp = model_input(x, None if cb is None else cb.to(dtype), variant)
    n = model(inp, torch.full((x.shape[0],), phi, dtype=torch.long))
    return n[0] if single else n


@torch.no_grad()
def postprocess_image(model: nn.Module, schedule: DiffusionSchedule, x_eta, c,
                      cfg: PostprocessConfig = PostprocessConfig()) -> torch.Tensor:
    """Corrected image clamped to [-1, 1]."""
    cfg.validate(schedule.T)
    check_variant(model, cfg.variant)
    x = torch.as_tensor(x_eta)
    if cfg.variant == "DLPDM":
        # the model emits the clean image directly, timestep pinned at 0
        out = estimate_noise(model, x, c, 0, variant="DLPDM")
    else:
        n = estimate_noise(model, x, c, cfg.phi, variant=cfg.variant)
        out = correct(schedule, x.to(n.dtype), n, cfg.s)
    return out.clamp(-1.0, 1.0)


@dataclass(frozen=True)
class CropRecord:
    height: int
    width: int
    pad_bottom: int = 0
    pad_right: int = 0

    @property
    def is_empty(self) -> bool:
        return self.pad_bottom == 0 and self.pad_right == 0


def resolve_resolution(x, multiple: int = 16):
    """Reflect-pad bottom/right to the next multiple of 16. Returns the padded
    image and the record needed by :func:`restore_resolution`."""
    arr = x.numpy() if isinstance(x, torch.Tensor) else np.asarray(x)
    h, w = arr.shape[-2:]
    pb, pr = -h % multiple, -w % multiple
    rec = CropRecord(h, w, pb, pr)
    if rec.is_empty:
        return x, rec
    pad = [(0, 0)] * (arr.ndim - 2) + [(0, pb), (0, pr)]
    # numpy's reflect handles pads larger than the image by repeated reflection
    padded = np.pad(arr, pad, mode="reflect" if min(h, w) > 1 else "edge")
    return (torch.from_numpy(padded) if isinstance(x, torch.Tensor) else padded), rec


def restore_resolution(x, record: CropRecord):
    return x[..., :record.height, :record.width]


class ForwardCounter(nn.Module):
    """Wraps a model and counts forward calls."""

    def __init__(self, model: nn.Module):
        super().__init__()
        self.model = model
        self.calls = 0

    @property
    def config(self):
        return self.model.config

    def forward(self, *args, **kwargs):
        self.calls += 1
        return self.model(*args, **kwargs)


def postprocess_file(model, schedule, enhanced_path, cond_path, out_path, cfg: PostprocessConfig) -> None:
    x = read_image(enhanced_path)
    c = read_image(cond_path) if cond_path is not None else None
    if c is not None and c.shape != x.shape:
        raise ValueError(f"size mismatch: {enhanced_path} is {x.shape[1:]}, {cond_path} is {c.shape[1:]}")
    xp, rec = resolve_resolution(x)
    cp = resolve_resolution(c)[0] if c is not None else None
    out = postprocess_image(model, schedule, torch.from_numpy(xp),
                            None if cp is None else torch.from_numpy(cp), cfg)
    write_image(out_path, restore_resolution(out.float().numpy(), rec))


def postprocess_dir(model, schedule, enhanced_dir, cond_dir, out_dir, cfg: PostprocessConfig,
                    threads: int = 1) -> tuple[list[str], list[str]]:
    """Post-process every enhanced image that has a same-named conditioning
    image. Returns (processed names, names that failed or had no match)."""
    cfg.validate(schedule.T)
    check_variant(model, cfg.variant)
    model.eval()
    enhanced = list_images(enhanced_dir)
    conds = list_images(cond_dir) if cond_dir is not None else {}
    need_cond = cfg.variant != "ULPDM"
    todo, failed = [], []
    for name in sorted(enhanced):
        if need_cond and name not in conds:
            log.error("no conditioning image for %s in %s", name, cond_dir)
            failed.append(name)
        else:
            todo.append(name)

    def run(name):
        postprocess_file(model, schedule, enhanced[name], conds.get(name) if need_cond else None,
                         Path(out_dir) / name, cfg)
        return name

    done = []
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            futures = {name: pool.submit(run, name) for name in todo}
            for name, fut in futures.items():
                try:
                    done.append(fut.result())
                except (ValueError, OSError) as e:
                    log.error("%s: %s", name, e)
                    failed.append(name)
    else:
        for name in todo:
            try:
                done.append(run(name))
            except (ValueError, OSError) as e:
                log.error("%s: %s", name, e)
                failed.append(name)
    return done, sorted(failed)
