"""Timestep-conditioned U-Net noise predictor."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class UNetConfig:
    in_channels: int = 6
    out_channels: int = 3
    stage_channels: list[int] = field(default_factory=lambda: [128, 256, 512, 512])
    blocks_per_stage: int = 2
    time_embed_base_dim: int = 128
    time_embed_dim: int = 512
    attention_heads: int = 8
    groupnorm_groups: int = 32

    def __post_init__(self):
        self.stage_channels = [int(c) for c in self.stage_channels]
        if len(self.stage_channels) != 4:
            raise ValueError(f"stage_channels needs exactly 4 entries, got {self.stage_channels}")
        bad = [c for c in self.stage_channels if c % self.groupnorm_groups]
        if bad:
            raise ValueError(f"stage channels {bad} not divisible by {self.groupnorm_groups} groups")
        if self.stage_channels[-1] % self.attention_heads:
            raise ValueError("latent channels must be divisible by attention_heads")
        if self.time_embed_base_dim % 2:
            raise ValueError("time_embed_base_dim must be even")
        if self.in_channels not in (3, 6):
            raise ValueError("in_channels must be 6 (conditional) or 3 (unconditional)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def miniature(cls, **overrides) -> "UNetConfig":
        """The small config used for smoke runs and gradient checks."""
        kw = dict(stage_channels=[8, 16, 32, 32], time_embed_base_dim=32, time_embed_dim=64,
                  attention_heads=8, groupnorm_groups=4)
        kw.update(overrides)
        return cls(**kw)


def sinusoidal_embedding(t, dim: int) -> torch.Tensor:
    """Transformer-style embedding: ``[sin(t w_k), cos(t w_k)]`` with
    ``w_k = exp(-k ln(10000) / (dim/2 - 1))``.

    ``t`` may be a scalar or a 1-D tensor; the result is (dim,) or (B, dim).
    """
    if dim % 2 or dim < 2:
        raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
    half = dim // 2
    scalar = not (isinstance(t, torch.Tensor) and t.ndim > 0)
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    if half == 1:
        freqs = torch.ones(1, dtype=torch.float64)
    else:
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / (half - 1))
    args = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1).float()
    return emb[0] if scalar else emb


class ResidualBlock(nn.Module):
    """GroupNorm -> SiLU -> conv -> + time -> GroupNorm -> SiLU -> conv, plus skip."""

    def __init__(self, c_in: int, c_out: int, time_dim: int, groups: int, eps: float = 1e-5):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.norm1 = nn.GroupNorm(groups, c_in, eps=eps)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(groups, c_out, eps=eps)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.c_in:
            raise ValueError(f"residual block expects {self.c_in} channels, got {x.shape[1]}")
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(t_emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention(nn.Module):
    """Multi-head scaled dot-product attention over the flattened grid, added
    back onto the input."""

    def __init__(self, channels: int, heads: int, groups: int):
        super().__init__()
        if channels % heads:
            raise ValueError(f"{channels} channels not divisible by {heads} heads")
        self.channels, self.heads = channels, heads
        self.norm = nn.GroupNorm(groups, channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        b, c, h, w = x.shape
        if c != self.channels:
            raise ValueError(f"attention expects {self.channels} channels, got {c}")
        d = c // self.heads
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, self.heads, d, h * w).unbind(1)
        # (b, heads, hw, hw)
        weights = torch.softmax(torch.einsum("bndq,bndk->bnqk", q, k) / math.sqrt(d), dim=-1)
        out = torch.einsum("bnqk,bndk->bndq", weights, v).reshape(b, c, h, w)
        out = x + self.proj(out)
        return (out, weights) if return_weights else out


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class UNet(nn.Module):
    """Four-stage encoder/decoder with skip concatenation and an attention
    middle block. Every encoder stage halves resolution, so inputs must be
    divisible by 16."""

    def __init__(self, config: UNetConfig | None = None):
        super().__init__()
        cfg = self.config = config or UNetConfig()
        ch, g, tdim = cfg.stage_channels, cfg.groupnorm_groups, cfg.time_embed_dim

        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_embed_base_dim, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.conv_in = nn.Conv2d(cfg.in_channels, ch[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        prev = ch[0]
        for c in ch:
            blocks = nn.ModuleList()
            for _ in range(cfg.blocks_per_stage):
                blocks.append(ResidualBlock(prev, c, tdim, g))
                prev = c
            self.down_blocks.append(blocks)
            self.downsamples.append(nn.Conv2d(c, c, 3, stride=2, padding=1))

        self.mid_block1 = ResidualBlock(prev, prev, tdim, g)
        self.mid_attn = SelfAttention(prev, cfg.attention_heads, g)
        self.mid_block2 = ResidualBlock(prev, prev, tdim, g)

        self.upsamples = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for c in reversed(ch):
            self.upsamples.append(Upsample(prev))
            blocks = nn.ModuleList()
            in_c = prev + c
            for _ in range(cfg.blocks_per_stage):
                blocks.append(ResidualBlock(in_c, c, tdim, g))
                in_c = c
            self.up_blocks.append(blocks)
            prev = c

        self.norm_out = nn.GroupNorm(g, prev)
        self.conv_out = nn.Conv2d(prev, cfg.out_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        cfg = self.config
        if x.ndim != 4:
            raise ValueError(f"expected (B, C, H, W) input, got shape {tuple(x.shape)}")
        if x.shape[1] != cfg.in_channels:
            raise ValueError(f"model expects {cfg.in_channels} input channels, got {x.shape[1]}")
        h, w = x.shape[-2:]
        if h % 16 or w % 16:
            raise ValueError(f"spatial size {h}x{w} not divisible by 16")

        t = torch.as_tensor(t, device=x.device)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        emb = sinusoidal_embedding(t.cpu(), cfg.time_embed_base_dim).to(x.device, x.dtype)
        emb = self.time_mlp(emb)

        hid = self.conv_in(x)
        skips = []
        for blocks, down in zip(self.down_blocks, self.downsamples):
            for block in blocks:
                hid = block(hid, emb)
            skips.append(hid)
            hid = down(hid)

        hid = self.mid_block2(self.mid_attn(self.mid_block1(hid, emb)), emb)

        for up, blocks in zip(self.upsamples, self.up_blocks):
            hid = torch.cat([up(hid), skips.pop()], dim=1)
            for block in blocks:
                hid = block(hid, emb)

        return self.conv_out(F.silu(self.norm_out(hid)))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
