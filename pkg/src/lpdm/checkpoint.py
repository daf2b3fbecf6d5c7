"""Checkpoint container.

Layout::

    b"LPDM1\\n" | u64 header length (LE) | JSON header | sha256(header + payload) | payload

The header records the U-Net config, the schedule parameters, the training
config and step, and an index of named arrays (dtype, shape, byte offset)
stored back to back in the payload.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import UNet, UNetConfig
from .schedule import DiffusionSchedule, build_linear_schedule
from .training import TrainConfig, Trainer

MAGIC = b"LPDM1\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: UNet
    schedule: DiffusionSchedule
    step: int = 0
    train_config: TrainConfig | None = None
    # parameter name -> (first moment, second moment)
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @property
    def variant(self) -> str:
        if self.train_config is not None:
            return self.train_config.variant
        return "ULPDM" if self.model.config.in_channels == 3 else "LPDM"


def _optimizer_moments(trainer: Trainer) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    out = {}
    state = trainer.optimizer.state
    for name, p in trainer.model.named_parameters():
        st = state.get(p)
        if st and "exp_avg" in st:
            out[name] = (st["exp_avg"].detach().cpu().numpy(), st["exp_avg_sq"].detach().cpu().numpy())
    return out


def save_checkpoint(path, model: UNet, schedule: DiffusionSchedule, trainer: Trainer | None = None) -> None:
    arrays: dict[str, np.ndarray] = {
        f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if trainer is not None:
        for name, (m, v) in _optimizer_moments(trainer).items():
            arrays[f"adam_m/{name}"] = m
            arrays[f"adam_v/{name}"] = v

    index, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)

    header = {
        "format_version": FORMAT_VERSION,
        "unet": model.config.to_dict(),
        "schedule": {"T": schedule.T, "beta_start": schedule.beta_start,
                     "beta_end": schedule.beta_end, "mode": schedule.mode},
        "step": trainer.step_count if trainer is not None else 0,
        "train": trainer.config.to_dict() if trainer is not None else None,
        "arrays": index,
        "payload_bytes": len(payload),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    digest = hashlib.sha256(hbytes + payload).digest()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(digest)
        fh.write(payload)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not an LPDM checkpoint or unsupported version (bad magic)")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    hbytes, digest = data[pos:pos + hlen], data[pos + hlen:pos + hlen + 32]
    payload = data[pos + hlen + 32:]
    if len(hbytes) != hlen or len(digest) != 32 or hashlib.sha256(hbytes + payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated file)")
    header = json.loads(hbytes)
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}")

    arrays = {}
    for entry in header["arrays"]:
        buf = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(buf, dtype=np.dtype(entry["dtype"]).newbyteorder("<")) \
            .reshape(entry["shape"]).copy()

    model = UNet(UNetConfig(**header["unet"]))
    state = {k[len("param/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param/")}
    model.load_state_dict(state, strict=True)
    moments = {k[len("adam_m/"):]: (v, arrays["adam_v/" + k[len("adam_m/"):]])
               for k, v in arrays.items() if k.startswith("adam_m/")}
    sch = header["schedule"]
    return Checkpoint(
        model=model,
        schedule=build_linear_schedule(sch["T"], sch["beta_start"], sch["beta_end"], sch["mode"]),
        step=header["step"],
        train_config=TrainConfig.from_dict(header["train"]) if header["train"] else None,
        moments=moments,
    )


def restore_trainer(ckpt: Checkpoint, pairs, config: TrainConfig | None = None) -> Trainer:
    """Rebuild a trainer positioned exactly where the checkpoint left off."""
    config = config or ckpt.train_config or TrainConfig()
    trainer = Trainer(ckpt.model, ckpt.schedule, config, pairs)
    trainer.step_count = ckpt.step
    if ckpt.moments:
        params = dict(ckpt.model.named_parameters())
        for name, (m, v) in ckpt.moments.items():
            trainer.optimizer.state[params[name]] = {
                "step": torch.tensor(float(ckpt.step), dtype=torch.float32),
                "exp_avg": torch.from_numpy(m.copy()),
                "exp_avg_sq": torch.from_numpy(v.copy()),
            }
    return trainer
