"""Paired data loading, augmentation and the noise-prediction training loop.

Randomness is counter-based: every training sample has a global index
``k = step * effective_batch + j`` and all of its draws (pair choice, crop,
flip, timestep, noise) come from a generator keyed on ``(seed, k)``. The
split of an effective batch into micro-batches, the number of loader
threads and checkpoint/resume boundaries therefore never change the draws.
"""
from __future__ import annotations

import csv
import functools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .images import list_images, read_image
from .schedule import DiffusionSchedule, q_sample

log = logging.getLogger(__name__)

VARIANTS = ("LPDM", "DLPDM", "ULPDM")

# spawn-key domains for the counter-based generators
_SAMPLE_STREAM = 1
_EPOCH_STREAM = 2


@dataclass
class TrainConfig:
    total_steps: int = 6000
    lr: float = 1e-6
    adamw_beta1: float = 0.9
    adamw_beta2: float = 0.999
    adamw_eps: float = 1e-8
    weight_decay: float = 0.01
    micro_batch: int = 4
    accumulation: int = 8
    crop_size: int = 256
    hflip_prob: float = 0.5
    seed: int = 0
    variant: str = "LPDM"
    checkpoint_every: int = 1000
    threads: int = 1

    def __post_init__(self):
        if self.crop_size % 16:
            raise ValueError(f"crop_size {self.crop_size} must be divisible by 16")
        if self.micro_batch < 1 or self.accumulation < 1:
            raise ValueError("micro_batch and accumulation must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must lie in [0, 1]")

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.accumulation

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class PairedSample:
    """A normally-exposed target ``x0`` and its under-exposed ``c``, both
    (3, H, W) in [-1, 1]."""
    x0: np.ndarray
    c: np.ndarray
    name: str = ""

    def __post_init__(self):
        if self.x0.shape != self.c.shape:
            raise ValueError(f"pair {self.name!r}: x0 {self.x0.shape} and c {self.c.shape} differ in size")

    def load(self) -> "PairedSample":
        return self


@dataclass(frozen=True)
class PairDescriptor:
    """Lazily decoded pair of files."""
    name: str
    low_path: Path
    high_path: Path

    def load(self) -> PairedSample:
        c = read_image(self.low_path)
        x0 = read_image(self.high_path)
        if c.shape != x0.shape:
            raise ValueError(f"size mismatch in pair: {self.low_path} is {c.shape[1:]}, "
                             f"{self.high_path} is {x0.shape[1:]}")
        return PairedSample(x0, c, self.name)


def load_paired_dataset(low_dir, high_dir) -> list[PairDescriptor]:
    low_dir, high_dir = Path(low_dir), Path(high_dir)
    for d in (low_dir, high_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"dataset directory not found: {d}")
    lows, highs = list_images(low_dir), list_images(high_dir)
    missing = sorted(set(lows) - set(highs))
    if missing:
        raise FileNotFoundError(f"no counterpart in {high_dir} for: {', '.join(missing)}")
    if not lows:
        log.warning("no images found in %s", low_dir)
    return [PairDescriptor(name, lows[name], highs[name]) for name in sorted(lows)]


def augment_pair(sample: PairedSample, rng: np.random.Generator, crop_size: int = 256,
                 hflip_prob: float = 0.5) -> PairedSample:
    """Random crop and horizontal flip, applied identically to both images.

    Images smaller than the crop are reflect-padded up to it first.
    """
    x0, c = sample.x0, sample.c
    h, w = x0.shape[1:]
    ph, pw = max(0, crop_size - h), max(0, crop_size - w)
    if ph or pw:
        pad = ((0, 0), (0, ph), (0, pw))
        x0, c = np.pad(x0, pad, mode="reflect"), np.pad(c, pad, mode="reflect")
        h, w = x0.shape[1:]
    top = int(rng.integers(0, h - crop_size + 1))
    left = int(rng.integers(0, w - crop_size + 1))
    win = (slice(None), slice(top, top + crop_size), slice(left, left + crop_size))
    x0, c = x0[win], c[win]
    if rng.random() < hflip_prob:
        x0, c = x0[:, :, ::-1], c[:, :, ::-1]
    return PairedSample(np.ascontiguousarray(x0), np.ascontiguousarray(c), sample.name)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_SAMPLE_STREAM, index)))


def draw_timesteps_and_noise(rng: np.random.Generator, T: int, shape) -> tuple[int, np.ndarray]:
    """One t ~ U{1..T} and one standard normal noise image."""
    t = int(rng.integers(1, T + 1))
    return t, rng.standard_normal(shape, dtype=np.float32)


def model_input(x, c, variant: str) -> torch.Tensor:
    """Noisy image first, then the conditioning image."""
    return x if variant == "ULPDM" else torch.cat([x, c], dim=1)


def diffusion_loss(model: nn.Module, schedule: DiffusionSchedule, x0: torch.Tensor, c: torch.Tensor,
                   t: torch.Tensor, eps: torch.Tensor, variant: str = "LPDM") -> torch.Tensor:
    """Mean squared error over batch, channels and pixels.

    LPDM/ULPDM regress the added noise; DLPDM regresses ``x0`` with the
    model's timestep input held at 0.
    """
    xt = q_sample(schedule, x0, t, eps)
    inp = model_input(xt, c, variant)
    if variant == "DLPDM":
        return torch.mean((model(inp, torch.zeros_like(t)) - x0) ** 2)
    return torch.mean((model(inp, t) - eps) ** 2)


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step, self.loss = step, loss


def training_step(model: nn.Module, schedule: DiffusionSchedule, batch: Sequence[PairedSample],
                  rng, variant: str = "LPDM", scale: float = 1.0) -> float:
    """Draw (t, eps) per sample, compute the loss and accumulate its gradient
    (times ``scale``) into the model's ``.grad`` buffers.

    ``rng`` is either one generator shared by the batch or one per sample.
    """
    if not batch:
        raise ValueError("empty batch")
    rngs = list(rng) if isinstance(rng, (list, tuple)) else [rng] * len(batch)
    ts, noise = zip(*(draw_timesteps_and_noise(r, schedule.T, s.x0.shape) for r, s in zip(rngs, batch)))
    dtype = next((p.dtype for p in model.parameters()), torch.float32)
    x0 = torch.from_numpy(np.stack([s.x0 for s in batch])).to(dtype)
    c = torch.from_numpy(np.stack([s.c for s in batch])).to(dtype)
    eps = torch.from_numpy(np.stack(noise)).to(dtype)
    loss = diffusion_loss(model, schedule, x0, c, torch.tensor(ts), eps, variant)
    if loss.requires_grad:
        (loss * scale).backward()
    return loss.item()


@functools.lru_cache(maxsize=8)
def _epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_EPOCH_STREAM, epoch)))
    return rng.permutation(n)


class Trainer:
    """Owns the model, the AdamW optimizer and the step counter."""

    def __init__(self, model: nn.Module, schedule: DiffusionSchedule, config: TrainConfig, pairs: Sequence):
        self.model, self.schedule, self.config = model, schedule, config
        self.pairs = list(pairs)
        self.step_count = 0
        self.optimizer = torch.optim.AdamW(
            model.parameters(), lr=config.lr, betas=(config.adamw_beta1, config.adamw_beta2),
            eps=config.adamw_eps, weight_decay=config.weight_decay)
        self._pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None

    def _pair_for(self, index: int):
        n = len(self.pairs)
        epoch, pos = divmod(index, n)
        return self.pairs[_epoch_permutation(self.config.seed, epoch, n)[pos]]

    def prepare(self, index: int) -> tuple[PairedSample, np.random.Generator]:
        """Augmented sample and its (already advanced) generator for global sample ``index``."""
        rng = sample_rng(self.config.seed, index)
        sample = augment_pair(self._pair_for(index).load(), rng, self.config.crop_size, self.config.hflip_prob)
        return sample, rng

    def _micro_batches(self):
        cfg = self.config
        base = self.step_count * cfg.effective_batch
        indices = range(base, base + cfg.effective_batch)
        if self._pool is None:
            prepared = [self.prepare(i) for i in indices]
        else:
            prepared = list(self._pool.map(self.prepare, indices))
        for m in range(cfg.accumulation):
            yield prepared[m * cfg.micro_batch:(m + 1) * cfg.micro_batch]

    def step(self) -> float:
        """One optimizer update over ``accumulation`` micro-batches; returns the mean loss."""
        if not self.pairs:
            raise ValueError("no training pairs")
        cfg = self.config
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        losses = []
        for chunk in self._micro_batches():
            samples, rngs = zip(*chunk)
            loss = training_step(self.model, self.schedule, samples, list(rngs), cfg.variant,
                                 scale=1.0 / cfg.accumulation)
            if not math.isfinite(loss):
                self.optimizer.zero_grad(set_to_none=True)
                raise NonFiniteLossError(self.step_count + 1, loss)
            losses.append(loss)
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)
        self.step_count += 1
        return float(np.mean(losses))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()


def train(trainer: Trainer, total_steps: int | None = None, log_path=None, checkpoint_dir=None) -> list[float]:
    """Run until ``total_steps`` optimizer steps have been taken, appending
    ``step,loss,wall_time`` rows to ``log_path`` and checkpointing every
    ``checkpoint_every`` steps and at the end."""
    from .checkpoint import save_checkpoint

    cfg = trainer.config
    total = cfg.total_steps if total_steps is None else total_steps
    losses = []
    fh = writer = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        fresh = trainer.step_count == 0 or not Path(log_path).exists()
        fh = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(["step", "loss", "wall_time"])
    start = time.perf_counter()
    try:
        while trainer.step_count < total:
            loss = trainer.step()
            losses.append(loss)
            if writer is not None:
                writer.writerow([trainer.step_count, repr(loss), f"{time.perf_counter() - start:.3f}"])
            if trainer.step_count % max(1, total // 20) == 0:
                log.info("step %d/%d loss %.6f", trainer.step_count, total, loss)
            if checkpoint_dir is not None and (trainer.step_count % cfg.checkpoint_every == 0
                                               or trainer.step_count == total):
                save_checkpoint(Path(checkpoint_dir) / f"step{trainer.step_count:06d}.lpdm", trainer.model,
                                trainer.schedule, trainer)
    finally:
        if fh is not None:
            fh.close()
    return losses
