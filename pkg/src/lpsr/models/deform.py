"""Deformable 3x3 convolution with bilinear sampling, written against plain tensor ops."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def bilinear_sample(x: torch.Tensor, py: torch.Tensor, px: torch.Tensor) -> torch.Tensor:
    """Sample ``x`` (B, C, H, W) at fractional pixel coordinates.

    ``py``/``px`` have shape (B, N, Ho, Wo). Points outside the image read
    zeros. Returns (B, C, N, Ho, Wo).
    """
    b, c, h, w = x.shape
    n, ho, wo = py.shape[1:]
    # align_corners=True maps -1/+1 onto the first/last pixel centers
    gx = px * (2.0 / max(w - 1, 1)) - 1.0
    gy = py * (2.0 / max(h - 1, 1)) - 1.0
    grid = torch.stack([gx, gy], dim=-1).reshape(b, n * ho, wo, 2)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
    return out.reshape(b, c, n, ho, wo)


def bilinear_gather(x: torch.Tensor, py: torch.Tensor, px: torch.Tensor) -> torch.Tensor:
    """Index-arithmetic twin of :func:`bilinear_sample` (four explicit corner gathers)."""
    b, c, h, w = x.shape
    y0 = torch.floor(py)
    x0 = torch.floor(px)
    ly = py - y0
    lx = px - x0
    flat = x.reshape(b, c, h * w)
    out = None
    for dy, dx, wt in (
        (0, 0, (1 - ly) * (1 - lx)),
        (0, 1, (1 - ly) * lx),
        (1, 0, ly * (1 - lx)),
        (1, 1, ly * lx),
    ):
        yy = y0 + dy
        xx = x0 + dx
        valid = (yy >= 0) & (yy <= h - 1) & (xx >= 0) & (xx <= w - 1)
        idx = (yy.clamp(0, h - 1) * w + xx.clamp(0, w - 1)).long()
        vals = flat.gather(2, idx.reshape(b, 1, -1).expand(b, c, -1)).reshape(b, c, *idx.shape[1:])
        term = vals * (wt * valid.to(wt.dtype)).unsqueeze(1)
        out = term if out is None else out + term
    return out


def deform_conv2d(
    x: torch.Tensor,
    offsets: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    padding: int = 1,
    dilation: int = 1,
    sampler=bilinear_sample,
) -> torch.Tensor:
    """Stride-1 deformable convolution.

    ``offsets`` is (B, 2*kh*kw, Ho, Wo) laid out as ``(dy, dx)`` pairs per
    kernel tap in row-major tap order. Zero offsets reproduce ``F.conv2d``.
    """
    b, _, h, w = x.shape
    out_c, in_c, kh, kw = weight.shape
    ho = h + 2 * padding - dilation * (kh - 1)
    wo = w + 2 * padding - dilation * (kw - 1)
    n = kh * kw
    if offsets.shape != (b, 2 * n, ho, wo):
        raise ValueError(f"offsets must be {(b, 2 * n, ho, wo)}, got {tuple(offsets.shape)}")
    dev, dt = x.device, x.dtype
    ky, kx = torch.meshgrid(
        torch.arange(kh, device=dev, dtype=dt) * dilation - padding,
        torch.arange(kw, device=dev, dtype=dt) * dilation - padding,
        indexing="ij",
    )
    gy, gx = torch.meshgrid(
        torch.arange(ho, device=dev, dtype=dt), torch.arange(wo, device=dev, dtype=dt), indexing="ij"
    )
    off = offsets.reshape(b, n, 2, ho, wo)
    py = gy + ky.reshape(1, n, 1, 1) + off[:, :, 0]
    px = gx + kx.reshape(1, n, 1, 1) + off[:, :, 1]
    cols = sampler(x, py, px)  # (B, C, N, Ho, Wo)
    out = torch.matmul(weight.reshape(out_c, in_c * n), cols.reshape(b, in_c * n, ho * wo))
    out = out.reshape(b, out_c, ho, wo)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


class DeformConv2d(nn.Module):
    """3x3 deformable conv whose offsets come from a zero-initialised conv on the same input."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, dilation: int = 1, bias: bool = True):
        super().__init__()
        self.padding = dilation * (kernel_size - 1) // 2
        self.dilation = dilation
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        self.offset = nn.Conv2d(
            in_channels, 2 * kernel_size * kernel_size, kernel_size,
            padding=self.padding, dilation=dilation,
        )
        nn.init.zeros_(self.offset.weight)
        nn.init.zeros_(self.offset.bias)

    def forward(self, x: torch.Tensor, offsets: torch.Tensor | None = None) -> torch.Tensor:
        if offsets is None:
            offsets = self.offset(x)
        return deform_conv2d(x, offsets, self.weight, self.bias, self.padding, self.dilation)

    def as_standard_conv(self, x: torch.Tensor) -> torch.Tensor:
        """The same kernel applied without deformation; reference for the zero-offset case."""
        return F.conv2d(x, self.weight, self.bias, padding=self.padding, dilation=self.dilation)
