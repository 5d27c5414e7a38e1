"""Super-resolution generator: residual concatenation blocks with a three-unit attention module."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from lpsr.models.deform import DeformConv2d


@dataclass(frozen=True)
class GeneratorConfig:
    base_channels: int = 32
    num_rcb: int = 4
    units_per_rcb: int = 3
    attention_shared: bool = True
    conv_kind: str = "deformable"
    upscale: int = 2

    def __post_init__(self):
        if self.upscale != 2:
            raise ValueError("only x2 upscaling is supported")
        if self.base_channels % 4:
            raise ValueError("base_channels must be divisible by 4")
        if self.conv_kind not in ("deformable", "depthwise"):
            raise ValueError(f"unknown conv_kind {self.conv_kind!r}")
        if self.num_rcb < 1 or self.units_per_rcb < 1:
            raise ValueError("num_rcb and units_per_rcb must be positive")


def pixel_shuffle(x: torch.Tensor, r: int = 2) -> torch.Tensor:
    """(B, C*r*r, H, W) -> (B, C, H*r, W*r); output[c, h*r+i, w*r+j] = input[c*r*r + i*r + j, h, w]."""
    b, c, h, w = x.shape
    if c % (r * r):
        raise ValueError(f"channel count {c} not divisible by {r * r}")
    oc = c // (r * r)
    return x.reshape(b, oc, r, r, h, w).permute(0, 1, 4, 2, 5, 3).reshape(b, oc, h * r, w * r)


def pixel_unshuffle(x: torch.Tensor, r: int = 2) -> torch.Tensor:
    b, c, h, w = x.shape
    if h % r or w % r:
        raise ValueError(f"spatial size {h}x{w} not divisible by {r}")
    return x.reshape(b, c, h // r, r, w // r, r).permute(0, 1, 3, 5, 2, 4).reshape(b, c * r * r, h // r, w // r)


def _spatial_conv(channels: int, kind: str) -> nn.Module:
    if kind == "deformable":
        return DeformConv2d(channels, channels, 3)
    return nn.Conv2d(channels, channels, 3, padding=1, groups=channels)


class ChannelUnit(nn.Module):
    """Channel gates computed from pixel-unshuffled features."""

    def __init__(self, channels: int, kind: str):
        super().__init__()
        self.conv = _spatial_conv(4 * channels, kind)
        self.fc = nn.Conv2d(4 * channels, channels, 1)

    def forward(self, x):
        u = F.relu(self.conv(pixel_unshuffle(x, 2)))
        return torch.sigmoid(self.fc(u.mean(dim=(2, 3), keepdim=True)))


class PositionalUnit(nn.Module):
    def __init__(self, channels: int, kind: str):
        super().__init__()
        self.conv = _spatial_conv(channels, kind)
        self.proj = nn.Conv2d(channels, 1, 1)

    def forward(self, x):
        return torch.sigmoid(self.proj(F.relu(self.conv(x))))


class GeometricUnit(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=2, dilation=2)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=2, dilation=2)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x):
        return self.conv2(F.relu(self.conv1(x)))


class AttentionModule(nn.Module):
    """Re-weights features by channel and position gates, then adds a geometric refinement."""

    def __init__(self, channels: int, kind: str):
        super().__init__()
        self.channel_unit = ChannelUnit(channels, kind)
        self.positional_unit = PositionalUnit(channels, kind)
        self.geometric_unit = GeometricUnit(channels)

    def forward(self, x):
        y = x * self.channel_unit(x) * self.positional_unit(x)
        return y + self.geometric_unit(y)


class ResidualConcatBlock(nn.Module):
    def __init__(self, channels: int, units: int):
        super().__init__()
        self.units = nn.ModuleList(nn.Conv2d(channels, channels, 3, padding=1) for _ in range(units))
        self.fuse = nn.Conv2d(channels * (units + 1), channels, 1)

    def forward(self, x):
        feats = [x]
        h = x
        for conv in self.units:
            h = F.relu(conv(h))
            feats.append(h)
        return x + self.fuse(torch.cat(feats, dim=1))


class Generator(nn.Module):
    """16x48 RGB -> 32x96 RGB. Output is a bicubic skip plus a learned residual, clamped to [0, 1]."""

    def __init__(self, cfg: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        self.sfe = nn.Conv2d(3, c, 3, padding=1)
        self.blocks = nn.ModuleList(ResidualConcatBlock(c, cfg.units_per_rcb) for _ in range(cfg.num_rcb))
        if cfg.attention_shared:
            self.attention = AttentionModule(c, cfg.conv_kind)
            self.attentions = None
        else:
            self.attention = None
            self.attentions = nn.ModuleList(AttentionModule(c, cfg.conv_kind) for _ in range(cfg.num_rcb))
        self.up = nn.Conv2d(c, c * 4, 3, padding=1)
        self.tail = nn.Conv2d(c, 3, 3, padding=1)

    def attention_for(self, i: int) -> AttentionModule:
        return self.attention if self.cfg.attention_shared else self.attentions[i]

    def forward(self, lr: torch.Tensor) -> torch.Tensor:
        if lr.dim() != 4 or tuple(lr.shape[1:]) != (3, 16, 48):
            raise ValueError(f"generator expects (B, 3, 16, 48) input, got {tuple(lr.shape)}")
        f0 = F.relu(self.sfe(lr))
        f = f0
        for i, block in enumerate(self.blocks):
            f = self.attention_for(i)(block(f))
        f = f + f0
        residual = self.tail(F.relu(pixel_shuffle(self.up(f), 2)))
        base = F.interpolate(lr, scale_factor=2, mode="bicubic", align_corners=False)
        return (base + residual).clamp(0.0, 1.0)

    def deformable_layers(self) -> list[DeformConv2d]:
        return [m for m in self.modules() if isinstance(m, DeformConv2d)]
