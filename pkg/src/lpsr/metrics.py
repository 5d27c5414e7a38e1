"""Recognition rates and PSNR. SSIM lives in :mod:`lpsr.losses` and is reused here."""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np
import torch

PSNR_CAP_DB = 100.0


def correct_chars(pred: str, gt: str) -> int:
    """Positional (Hamming) character matches between two equal-length strings."""
    if len(pred) != len(gt):
        raise ValueError(f"length mismatch: {pred!r} vs {gt!r}")
    return sum(a == b for a, b in zip(pred, gt))


def recognition_rates(pairs: Iterable[tuple[str, str]], length: int = 7) -> tuple[float, float, float]:
    """``(rr_all, rr_ge6, rr_ge5)`` over ``(pred, gt)`` pairs.

    Each rate is the fraction of plates with all 7, at least 6, or at least 5
    characters matched in place.
    """
    counts = []
    for pred, gt in pairs:
        if len(gt) != length:
            raise ValueError(f"ground truth {gt!r} is not {length} characters long")
        counts.append(correct_chars(pred, gt))
    if not counts:
        raise ValueError("recognition_rates needs at least one pair")
    c = np.asarray(counts)
    n = len(c)
    return (
        int((c == length).sum()) / n,
        int((c >= length - 1).sum()) / n,
        int((c >= length - 2).sum()) / n,
    )


def psnr(a, b, cap: float = PSNR_CAP_DB) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1]; identical images report ``cap``."""
    a = torch.as_tensor(np.asarray(a) if not isinstance(a, torch.Tensor) else a, dtype=torch.float64)
    b = torch.as_tensor(np.asarray(b) if not isinstance(b, torch.Tensor) else b, dtype=torch.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(torch.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def char_accuracy(preds: Sequence[str], gts: Sequence[str]) -> float:
    total = sum(len(g) for g in gts)
    return sum(correct_chars(p, g) for p, g in zip(preds, gts)) / max(total, 1)
