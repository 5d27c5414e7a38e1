"""Layout- and character-oriented loss (LCOFL), SSIM, and penalty-weight updates.

Probabilities follow the OCR contract: a ``(..., K, C)`` tensor of per-position
class probabilities, each row summing to one. Ground truth is a ``(..., K)``
tensor of class indices. Leading batch dimensions are averaged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from lpsr.alphabet import ALPHABET, Alphabet

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0


@dataclass(frozen=True)
class ConfusionRule:
    """An off-diagonal count is "frequent" when it reaches both thresholds."""

    min_count: int = 5
    min_fraction: float = 0.1

    def is_frequent(self, count: int, row_total: int) -> bool:
        if count <= 0:
            return False
        return count >= max(self.min_count, self.min_fraction * row_total)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.1
    beta: float = 1.0
    w_max: float = 5.0
    confusion_min_count: int = 5
    confusion_min_fraction: float = 0.1
    eps: float = LOG_FLOOR
    ssim: SsimParams = field(default_factory=SsimParams)

    @property
    def rule(self) -> ConfusionRule:
        return ConfusionRule(self.confusion_min_count, self.confusion_min_fraction)


@dataclass(frozen=True)
class PenaltyWeights:
    """Per-class cross-entropy weights; 1 means no penalization."""

    values: np.ndarray
    w_max: float = 5.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("penalty weights must be a vector")
        if np.any(v < 1.0) or np.any(v > self.w_max + 1e-12):
            raise ValueError(f"penalty weights must lie in [1, {self.w_max}]")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def ones(cls, num_classes: int = len(ALPHABET), w_max: float = 5.0) -> "PenaltyWeights":
        return cls(np.ones(num_classes), w_max)

    def as_tensor(self, dtype=torch.float32, device=None) -> torch.Tensor:
        return torch.tensor(self.values, dtype=dtype, device=device)

    def digest(self) -> str:
        import hashlib

        return hashlib.sha256(np.round(self.values, 12).tobytes()).hexdigest()[:16]

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class ConfusionMatrix:
    """``counts[i, j]``: ground-truth class ``i`` predicted as class ``j``."""

    counts: np.ndarray

    @classmethod
    def from_indices(cls, gt, pred, num_classes: int = len(ALPHABET)) -> "ConfusionMatrix":
        gt = np.asarray(gt, dtype=np.int64).ravel()
        pred = np.asarray(pred, dtype=np.int64).ravel()
        if gt.shape != pred.shape:
            raise ValueError("gt and pred must have the same number of positions")
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (gt, pred), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class LossBreakdown:
    l_c: torch.Tensor
    l_p: torch.Tensor
    l_s: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("l_c", "l_p", "l_s", "total")}


def _check_probs(probs: torch.Tensor, gt: torch.Tensor) -> None:
    if probs.shape[:-1] != gt.shape:
        raise ValueError(
            f"probability rows {tuple(probs.shape[:-1])} do not match ground truth {tuple(gt.shape)}"
        )


def classification_loss(
    probs: torch.Tensor,
    gt: torch.Tensor,
    weights: torch.Tensor | PenaltyWeights | None = None,
    eps: float = LOG_FLOOR,
) -> torch.Tensor:
    """Weighted cross-entropy ``-(1/K) sum_k w[gt_k] log p_k(gt_k)``, batch-averaged."""
    gt = torch.as_tensor(gt, dtype=torch.long, device=probs.device)
    _check_probs(probs, gt)
    if weights is None:
        w = torch.ones(probs.shape[-1], dtype=probs.dtype, device=probs.device)
    elif isinstance(weights, PenaltyWeights):
        w = weights.as_tensor(probs.dtype, probs.device)
    else:
        w = weights.to(probs)
    p_gt = probs.gather(-1, gt.unsqueeze(-1)).squeeze(-1)
    nll = -torch.log(p_gt.clamp_min(eps)) * w[gt]
    return nll.mean(dim=-1).mean()


def wrong_class_mask(gt: torch.Tensor, alphabet: Alphabet = ALPHABET) -> torch.Tensor:
    """Boolean ``(..., K, C)`` mask of classes whose type (digit/letter) differs from ``gt``."""
    digit = torch.as_tensor(alphabet.digit_mask, device=gt.device)
    gt_is_digit = digit[gt]
    return digit.expand(*gt.shape, len(alphabet)) != gt_is_digit.unsqueeze(-1)


def position_penalty(pred_class: int, gt_class: int, beta: float, alphabet: Alphabet = ALPHABET) -> float:
    """Per-position layout charge: digit where a letter belongs, or a letter where a digit belongs."""
    d_pred = beta if alphabet.is_digit(pred_class) else 0.0
    a_pred = beta if alphabet.is_letter(pred_class) else 0.0
    d_gt = 1.0 if alphabet.is_digit(gt_class) else 0.0
    a_gt = 1.0 if alphabet.is_letter(gt_class) else 0.0
    # one β per misplacement, not β² as a literal product of the two indicators would give
    return d_pred * a_gt + a_pred * d_gt


def layout_penalty(
    probs: torch.Tensor,
    gt: torch.Tensor,
    beta: float = 1.0,
    mode: str = "soft",
    alphabet: Alphabet = ALPHABET,
) -> torch.Tensor:
    """Layout penalty summed over positions, batch-averaged.

    ``hard`` charges ``beta`` where the argmax class type disagrees with the
    ground truth; ``soft`` charges ``beta`` times the probability mass on the
    wrong class type and is differentiable. Both agree on one-hot rows.
    """
    gt = torch.as_tensor(gt, dtype=torch.long, device=probs.device)
    _check_probs(probs, gt)
    if beta < 0:
        raise ValueError("beta must be non-negative")
    wrong = wrong_class_mask(gt, alphabet)
    if mode == "soft":
        per_pos = (probs * wrong.to(probs.dtype)).sum(dim=-1)
    elif mode == "hard":
        pred = torch.as_tensor(first_argmax(probs.detach().cpu().numpy()), device=probs.device)
        per_pos = wrong.gather(-1, pred.unsqueeze(-1)).squeeze(-1).to(probs.dtype)
    else:
        raise ValueError(f"unknown layout penalty mode {mode!r}")
    return beta * per_pos.sum(dim=-1).mean()


def _gaussian_window(params: SsimParams, dtype, device) -> torch.Tensor:
    half = (params.window - 1) / 2
    x = torch.arange(params.window, dtype=dtype, device=device) - half
    g = torch.exp(-(x**2) / (2 * params.sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def to_luminance(img: torch.Tensor) -> torch.Tensor:
    """RGB mean over the channel axis of a ``(..., 3, H, W)`` tensor, kept as one channel."""
    return img.mean(dim=-3, keepdim=True)


def ssim_map(a: torch.Tensor, b: torch.Tensor, params: SsimParams = SsimParams()) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    squeeze = a.dim() == 3
    if squeeze:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    x, y = to_luminance(a), to_luminance(b)
    if min(x.shape[-2:]) < params.window:
        raise ValueError(f"images smaller than the {params.window}px SSIM window")
    win = _gaussian_window(params, x.dtype, x.device)[None, None]
    c1 = (params.k1 * params.data_range) ** 2
    c2 = (params.k2 * params.data_range) ** 2

    mu_x = F.conv2d(x, win)
    mu_y = F.conv2d(y, win)
    sxx = F.conv2d(x * x, win) - mu_x**2
    syy = F.conv2d(y * y, win) - mu_y**2
    sxy = F.conv2d(x * y, win) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    out = (num / den).squeeze(1)
    return out[0] if squeeze else out


def ssim(a: torch.Tensor, b: torch.Tensor, params: SsimParams = SsimParams()) -> torch.Tensor:
    """Mean local SSIM of the luminance of ``(3, H, W)`` or ``(B, 3, H, W)`` images.

    Uses a Gaussian window and "valid" filtering (no border padding). Returns a
    scalar for a single image pair and a ``(B,)`` tensor for batches.
    """
    return ssim_map(a, b, params).mean(dim=(-2, -1))


def ssim_numpy(a: np.ndarray, b: np.ndarray, params: SsimParams = SsimParams()) -> float:
    """SSIM for ``H x W x 3`` arrays; thin wrapper over :func:`ssim`."""
    ta = torch.from_numpy(np.ascontiguousarray(a, dtype=np.float64)).permute(2, 0, 1)
    tb = torch.from_numpy(np.ascontiguousarray(b, dtype=np.float64)).permute(2, 0, 1)
    return float(ssim(ta, tb, params))


def dissimilarity_loss(sr: torch.Tensor, hr: torch.Tensor, params: SsimParams = SsimParams()) -> torch.Tensor:
    """``(1 - SSIM) / 2`` averaged over the batch."""
    return ((1 - ssim(sr, hr, params)) / 2).mean()


def lcofl(
    probs: torch.Tensor,
    gt: torch.Tensor,
    sr: torch.Tensor,
    hr: torch.Tensor,
    weights: torch.Tensor | PenaltyWeights | None = None,
    beta: float = 1.0,
    *,
    mode: str = "soft",
    use_layout: bool = True,
    eps: float = LOG_FLOOR,
    ssim_params: SsimParams = SsimParams(),
    alphabet: Alphabet = ALPHABET,
) -> LossBreakdown:
    l_c = classification_loss(probs, gt, weights, eps)
    if use_layout:
        l_p = layout_penalty(probs, gt, beta, mode, alphabet)
    else:
        l_p = torch.zeros((), dtype=probs.dtype, device=probs.device)
    l_s = dissimilarity_loss(sr, hr, ssim_params)
    return LossBreakdown(l_c, l_p, l_s, l_c + l_p + l_s)


def update_penalty_weights(
    weights: PenaltyWeights,
    cm: ConfusionMatrix,
    alpha: float,
    rule: ConfusionRule = ConfusionRule(),
) -> PenaltyWeights:
    """Raise by ``alpha`` (capped) the weight of every GT class with a frequent confusion."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    counts = cm.counts
    row_totals = counts.sum(axis=1)
    new = weights.values.copy()
    for i in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            if i != j and rule.is_frequent(int(counts[i, j]), int(row_totals[i])):
                new[i] = min(new[i] + alpha, weights.w_max)
                break
    return PenaltyWeights(new, weights.w_max)


def first_argmax(probs: np.ndarray) -> np.ndarray:
    """Row-wise argmax over the last axis; ties go to the lowest index."""
    return np.argmax(np.asarray(probs), axis=-1)


def argmax_decode(probs, alphabet: Alphabet = ALPHABET) -> str | list[str]:
    """Decode ``(K, C)`` probabilities to a string, or ``(B, K, C)`` to a list of strings."""
    if isinstance(probs, torch.Tensor):
        probs = probs.detach().cpu().numpy()
    idx = first_argmax(probs)
    if idx.ndim == 1:
        return alphabet.decode(idx)
    return [alphabet.decode(row) for row in idx]


def one_hot_probs(indices: Sequence[int], num_classes: int = len(ALPHABET), dtype=torch.float64) -> torch.Tensor:
    return F.one_hot(torch.as_tensor(list(indices)), num_classes).to(dtype)

