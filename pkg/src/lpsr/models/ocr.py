"""The two OCR networks: a slot-pooling discriminator and a multi-branch evaluator.

Both map a (B, 3, 32, 96) image to (B, 7, 36) class probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class OcrConfig:
    role: str = "discriminator"
    decode_length: int = 7
    num_classes: int = 36
    branch_style: str = "sequence_slots"
    width: int = 32

    def __post_init__(self):
        if self.decode_length != 7 or self.num_classes != 36:
            raise ValueError("OCR heads are fixed at 7 positions x 36 classes")
        if self.role not in ("discriminator", "evaluator"):
            raise ValueError(f"unknown OCR role {self.role!r}")
        if self.branch_style not in ("sequence_slots", "fc_branches"):
            raise ValueError(f"unknown branch style {self.branch_style!r}")

    @classmethod
    def discriminator(cls) -> "OcrConfig":
        return cls("discriminator", branch_style="sequence_slots")

    @classmethod
    def evaluator(cls) -> "OcrConfig":
        return cls("evaluator", branch_style="fc_branches")


def _block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class OcrBase(nn.Module):
    cfg: OcrConfig

    def logits(self, img: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if img.dim() != 4 or tuple(img.shape[1:]) != (3, 32, 96):
            raise ValueError(f"OCR expects (B, 3, 32, 96) input, got {tuple(img.shape)}")
        return F.softmax(self.logits(img), dim=-1)


class SlotOcr(OcrBase):
    """Conv encoder, width pooled into 7 slots, one linear classifier per slot."""

    def __init__(self, cfg: OcrConfig = OcrConfig.discriminator()):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.encoder = nn.Sequential(
            _block(3, w), nn.MaxPool2d(2),            # 16x48
            _block(w, 2 * w), nn.MaxPool2d(2),        # 8x24
            _block(2 * w, 4 * w), _block(4 * w, 4 * w),
            nn.MaxPool2d((2, 1)),                     # 4x24
        )
        feat = 4 * w * 4
        self.slot_weight = nn.Parameter(torch.randn(cfg.decode_length, feat, cfg.num_classes) / feat**0.5)
        self.slot_bias = nn.Parameter(torch.zeros(cfg.decode_length, cfg.num_classes))

    def logits(self, img):
        f = self.encoder(img)
        f = F.adaptive_avg_pool2d(f, (f.shape[2], self.cfg.decode_length))  # B, C, 4, 7
        slots = f.permute(0, 3, 1, 2).flatten(2)  # B, 7, C*4
        return torch.einsum("bkf,kfc->bkc", slots, self.slot_weight) + self.slot_bias


class BranchOcr(OcrBase):
    """Shared conv trunk and FC layer, then 7 independent fully connected branches."""

    def __init__(self, cfg: OcrConfig = OcrConfig.evaluator()):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.trunk = nn.Sequential(
            _block(3, w), nn.MaxPool2d(2),            # 16x48
            _block(w, 2 * w), nn.MaxPool2d(2),        # 8x24
            _block(2 * w, 2 * w), nn.MaxPool2d(2),    # 4x12
        )
        self.shared = nn.Linear(2 * w * 4 * 12, 256)
        self.branches = nn.ModuleList(nn.Linear(256, cfg.num_classes) for _ in range(cfg.decode_length))

    def logits(self, img):
        h = F.relu(self.shared(self.trunk(img).flatten(1)))
        return torch.stack([branch(h) for branch in self.branches], dim=1)


def build_ocr(cfg: OcrConfig) -> OcrBase:
    if cfg.branch_style == "sequence_slots":
        return SlotOcr(cfg)
    return BranchOcr(cfg)
