"""Slow, obviously-correct reference implementations used to check the fast paths.

Nothing here is used for training. Each function trades speed for a direct
reading of its definition.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
import torch

from lpsr.alphabet import ALPHABET, Alphabet
from lpsr.losses import SsimParams


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.array([math.exp(-(v * v) / (2 * sigma * sigma)) for v in ax])
    w = np.outer(g, g)
    return w / w.sum()


def ssim_reference(a: np.ndarray, b: np.ndarray, params: SsimParams = SsimParams()) -> float:
    """Sliding-window SSIM on the RGB-mean luminance of two ``H x W x 3`` images.

    Visits every fully-contained window position and evaluates the local
    statistics one window at a time.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    if a.ndim == 3:
        a = a.mean(axis=2)
        b = b.mean(axis=2)
    w = gaussian_window(params.window, params.sigma)
    c1 = (params.k1 * params.data_range) ** 2
    c2 = (params.k2 * params.data_range) ** 2
    k = params.window
    h, wd = a.shape
    total, count = 0.0, 0
    for i in range(h - k + 1):
        for j in range(wd - k + 1):
            pa = a[i : i + k, j : j + k]
            pb = b[i : i + k, j : j + k]
            mu_a = float((w * pa).sum())
            mu_b = float((w * pb).sum())
            var_a = float((w * (pa - mu_a) ** 2).sum())
            var_b = float((w * (pb - mu_b) ** 2).sum())
            cov = float((w * (pa - mu_a) * (pb - mu_b)).sum())
            total += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
            count += 1
    return total / count


def layout_penalty_reference(pred: str, gt: str, beta: float = 1.0, alphabet: Alphabet = ALPHABET) -> float:
    """Scan the 7 positions; charge ``beta`` wherever the digit/letter kind differs."""
    if len(pred) != len(gt):
        raise ValueError("length mismatch")
    total = 0.0
    for p, g in zip(pred, gt):
        p_digit = p.isdigit()
        g_digit = g.isdigit()
        if p_digit != g_digit:
            total += beta
    return total


def recognition_rates_reference(pairs) -> tuple[float, float, float]:
    n = all7 = ge6 = ge5 = 0
    for pred, gt in pairs:
        hits = 0
        for i in range(len(gt)):
            if pred[i] == gt[i]:
                hits += 1
        n += 1
        all7 += hits == 7
        ge6 += hits >= 6
        ge5 += hits >= 5
    return all7 / n, ge6 / n, ge5 / n


def finite_difference(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, step: float = 1e-5,
                      indices: np.ndarray | None = None) -> torch.Tensor:
    """Central differences of scalar ``f`` at ``x`` (float64), optionally at a subset of flat indices."""
    x = x.detach().clone()
    flat = x.view(-1)
    grad = torch.zeros_like(flat)
    idx = range(flat.numel()) if indices is None else indices
    with torch.no_grad():
        for i in idx:
            orig = float(flat[i])
            flat[i] = orig + step
            hi = float(f(x))
            flat[i] = orig - step
            lo = float(f(x))
            flat[i] = orig
            grad[i] = (hi - lo) / (2 * step)
    return grad.view_as(x)


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``; 0 when both vanish."""
    num = float(torch.linalg.vector_norm(analytic - numeric))
    den = max(float(torch.linalg.vector_norm(analytic)), float(torch.linalg.vector_norm(numeric)))
    return 0.0 if den == 0.0 else num / den
