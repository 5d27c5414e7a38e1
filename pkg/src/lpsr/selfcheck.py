"""Fast invariant checks: gradient agreement, oracle agreement, closed forms.

Each check returns a :class:`CheckResult` carrying the measured quantity and
the bound it was held to, so the CLI ``selfcheck`` and the acceptance tests
share one implementation.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from lpsr.alphabet import ALPHABET, LAYOUTS, LpLabel
from lpsr.losses import (
    ConfusionMatrix,
    ConfusionRule,
    PenaltyWeights,
    classification_loss,
    dissimilarity_loss,
    layout_penalty,
    lcofl,
    one_hot_probs,
    position_penalty,
    ssim,
    update_penalty_weights,
    argmax_decode,
)
from lpsr.metrics import psnr, recognition_rates
from lpsr.models import DeformConv2d, Generator, GeneratorConfig, pixel_shuffle, pixel_unshuffle
from lpsr.oracles import (
    finite_difference,
    layout_penalty_reference,
    recognition_rates_reference,
    relative_error,
    ssim_reference,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    bound: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: measured={self.measured:.3g} bound={self.bound:.3g} {self.detail}".rstrip()


def _random_probs(rng: torch.Generator, shape=(2, 7, 36)) -> torch.Tensor:
    # moderate logits keep every probability well above the log floor; near p -> 0
    # the third derivative of -log p is ~2/p^3 and swamps a 1e-5 central difference
    return torch.softmax(torch.randn(*shape, generator=rng, dtype=torch.float64) * 0.5, dim=-1)


def _random_gt(rng: np.random.Generator, batch: int = 2) -> torch.Tensor:
    rows = []
    for _ in range(batch):
        layout = ("brazilian", "mercosur")[rng.integers(2)]
        rows.append(ALPHABET.encode(LAYOUTS[layout].random_text(rng)))
    return torch.tensor(rows)


def _grad_error(f, inputs: list[torch.Tensor], rng: np.random.Generator, subset: int | None) -> float:
    """Worst norm-wise relative error between autograd and central differences over ``inputs``."""
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    f(*leaves).backward()
    worst = 0.0
    for k, leaf in enumerate(leaves):
        idx = None
        if subset is not None and leaf.numel() > subset:
            idx = rng.choice(leaf.numel(), subset, replace=False)

        def fk(x, k=k):
            args = [l.detach() for l in leaves]
            args[k] = x
            return f(*args)

        num = finite_difference(fk, leaf.detach(), 1e-5, idx)
        ana = leaf.grad.detach()
        if idx is not None:
            num, ana = num.view(-1)[idx], ana.view(-1)[idx]
        worst = max(worst, relative_error(ana, num))
    return worst


def gradient_check(term: str, trials: int = 20, seed: int = 0, subset: int | None = 96) -> CheckResult:
    """Autograd vs. central differences (step 1e-5, float64) for one loss term."""
    t0 = time.perf_counter()
    rng = np.random.default_rng([seed, 11])
    trng = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(trials):
        gt = _random_gt(rng)
        probs = _random_probs(trng)
        w = torch.from_numpy(rng.uniform(1.0, 5.0, 36))
        sr = torch.rand(2, 3, 12, 16, generator=trng, dtype=torch.float64)
        hr = torch.rand(2, 3, 12, 16, generator=trng, dtype=torch.float64)
        beta = float(rng.uniform(0.5, 2.0))
        if term == "classification":
            err = _grad_error(lambda p, w: classification_loss(p, gt, w), [probs, w], rng, subset)
        elif term == "layout_soft":
            err = _grad_error(lambda p: layout_penalty(p, gt, beta, "soft"), [probs], rng, subset)
        elif term == "dissimilarity":
            err = _grad_error(lambda a, b: dissimilarity_loss(a, b), [sr, hr], rng, subset)
        elif term == "composite":
            err = _grad_error(lambda p, a, b, w: lcofl(p, gt, a, b, w, beta).total, [probs, sr, hr, w], rng, subset)
        else:
            raise ValueError(f"unknown term {term!r}")
        worst = max(worst, err)
    return CheckResult(f"gradient[{term}]", worst < 1e-4, worst, 1e-4, f"trials={trials}", time.perf_counter() - t0)


def ssim_oracle_check(pairs: int = 5, seed: int = 0) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng([seed, 12])
    worst = 0.0
    for _ in range(pairs):
        a = rng.random((32, 96, 3))
        # correlated partner so the comparison is not dominated by near-zero values
        b = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1)
        fast = float(ssim(torch.from_numpy(a).permute(2, 0, 1), torch.from_numpy(b).permute(2, 0, 1)))
        worst = max(worst, abs(fast - ssim_reference(a, b)))
    return CheckResult("ssim_vs_sliding_window_oracle", worst < 1e-6, worst, 1e-6, f"pairs={pairs}", time.perf_counter() - t0)


def ssim_identity_check(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng([seed, 13])
    worst = 0.0
    for _ in range(5):
        x = torch.from_numpy(rng.random((3, 32, 96)))
        worst = max(worst, abs(float(ssim(x, x)) - 1.0))
    return CheckResult("ssim_identity", worst < 1e-9, worst, 1e-9)


def layout_oracle_check(pairs: int = 1000, seed: int = 0) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng([seed, 14])
    mismatches = 0
    for i in range(pairs):
        layout = ("brazilian", "mercosur")[i % 2]
        gt_text = LAYOUTS[layout].random_text(rng)
        # mix fully random decodes with layout-valid ones so both branches get exercised
        if rng.random() < 0.5:
            pred_idx = rng.integers(0, 36, 7)
        else:
            other = ("brazilian", "mercosur")[rng.integers(2)]
            pred_idx = np.array(ALPHABET.encode(LAYOUTS[other].random_text(rng)))
        logits = rng.normal(0, 1, (7, 36))
        logits[np.arange(7), pred_idx] += 10.0
        probs = torch.softmax(torch.from_numpy(logits), -1)
        pred_text = argmax_decode(probs)
        beta = float(rng.choice([0.5, 1.0, 2.0]))
        fast = float(layout_penalty(probs, torch.tensor(ALPHABET.encode(gt_text)), beta, "hard"))
        if abs(fast - layout_penalty_reference(pred_text, gt_text, beta)) > 1e-12:
            mismatches += 1
    table_bad = 0
    for p in range(36):
        for g in range(36):
            expected = layout_penalty_reference(ALPHABET.symbols[p], ALPHABET.symbols[g], 1.7)
            if position_penalty(p, g, 1.7) != expected:
                table_bad += 1
    bad = mismatches + table_bad
    return CheckResult(
        "layout_penalty_vs_position_scan", bad == 0, bad, 0,
        f"pairs={pairs} table=36x36 table_mismatches={table_bad}", time.perf_counter() - t0,
    )


def soft_hard_agreement_check(decodes: int = 500, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng([seed, 15])
    worst = 0.0
    for _ in range(decodes):
        gt = _random_gt(rng, 1)[0]
        probs = one_hot_probs(rng.integers(0, 36, 7))
        soft = float(layout_penalty(probs, gt, 1.0, "soft"))
        hard = float(layout_penalty(probs, gt, 1.0, "hard"))
        worst = max(worst, abs(soft - hard))
    return CheckResult("layout_soft_equals_hard_on_one_hot", worst == 0.0, worst, 0.0, f"decodes={decodes}")


def closed_form_check() -> list[CheckResult]:
    probs = torch.full((7, 36), 1 / 36, dtype=torch.float64)
    lc = float(classification_loss(probs, torch.tensor(ALPHABET.encode("ABC1234"))))
    e1 = abs(lc - math.log(36))
    a = torch.zeros(3, 32, 96, dtype=torch.float64)
    e2 = abs(psnr(a, a + 0.5) - 10 * math.log10(4))
    e3 = abs(psnr(a + 0.5, a + 0.5) - 100.0)
    return [
        CheckResult("uniform_classification_loss_is_ln36", e1 < 1e-9, e1, 1e-9),
        CheckResult("constant_offset_psnr_6.0206dB", e2 < 1e-4, e2, 1e-4),
        CheckResult("identical_psnr_capped", e3 == 0.0, e3, 0.0),
    ]


def deformable_degeneracy_check(seed: int = 0) -> CheckResult:
    """Every deformable layer, with offsets forced to zero, against plain convolution."""
    torch.manual_seed(seed)
    gen = Generator(GeneratorConfig(attention_shared=False)).double()
    worst = 0.0
    layers = gen.deformable_layers()
    for layer in layers:
        # randomize the offset predictor so "forced to zero" is not the init state
        torch.nn.init.normal_(layer.offset.weight, std=0.1)
        c = layer.weight.shape[1]
        x = torch.randn(2, c, 8, 24, dtype=torch.float64)
        zero = torch.zeros(2, 18, 8, 24, dtype=torch.float64)
        with torch.no_grad():
            worst = max(worst, float((layer(x, zero) - layer.as_standard_conv(x)).abs().max()))
    return CheckResult("deformable_zero_offset_equals_conv", worst < 1e-6, worst, 1e-6, f"layers={len(layers)}")


def weight_update_check(alpha: float = 0.1) -> list[CheckResult]:
    w0 = PenaltyWeights.ones()
    diag = ConfusionMatrix(np.diag(np.full(36, 50)))
    same = float(np.abs(update_penalty_weights(w0, diag, alpha).values - w0.values).max())

    s, five = ALPHABET.class_of("S"), ALPHABET.class_of("5")
    counts = np.diag(np.full(36, 50))
    counts[s, s], counts[s, five] = 10, 40
    cm = ConfusionMatrix(counts)
    w1 = update_penalty_weights(w0, cm, alpha, ConfusionRule(5, 0.1))
    delta = w1.values - w0.values
    expected = np.zeros(36)
    expected[s] = alpha
    bump_err = float(np.abs(delta - expected).max())

    w = w0
    for _ in range(200):
        w = update_penalty_weights(w, cm, alpha)
    sat_err = abs(float(w.values[s]) - w.w_max)
    return [
        CheckResult("weights_unchanged_on_diagonal_cm", same == 0.0, same, 0.0),
        CheckResult("dominant_S_to_5_raises_only_w[S]_by_alpha", bump_err < 1e-12, bump_err, 1e-12),
        CheckResult("repeated_updates_saturate_at_w_max", sat_err < 1e-12, sat_err, 1e-12),
    ]


def steplr_check() -> CheckResult:
    from lpsr.trainer import TrainConfig, TrainState, lr_schedule, observe_validation

    cfg = TrainConfig()
    state = observe_validation(TrainState.initial(cfg), 0.5)
    lrs = []
    for _ in range(10):
        state = lr_schedule(observe_validation(state, 0.5), cfg)
        lrs.append(state.current_lr)
    err = max(abs(lrs[4] - 9e-5), abs(lrs[9] - 8.1e-5), abs(lrs[3] - 1e-4))
    return CheckResult("steplr_1e-4_to_9e-5_to_8.1e-5", err < 1e-15, err, 1e-15, f"lr@5={lrs[4]:.3g} lr@10={lrs[9]:.3g}")


def recognition_oracle_check(pairs: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng([seed, 16])
    data = []
    for _ in range(pairs):
        gt = LAYOUTS[("brazilian", "mercosur")[rng.integers(2)]].random_text(rng)
        pred = list(gt)
        for k in rng.choice(7, rng.integers(0, 4), replace=False):
            pred[k] = ALPHABET.symbols[rng.integers(36)]
        data.append(("".join(pred), gt))
    err = max(abs(a - b) for a, b in zip(recognition_rates(data), recognition_rates_reference(data)))
    return CheckResult("recognition_rates_vs_oracle", err == 0.0, err, 0.0, f"pairs={pairs}")


def pixel_shuffle_check(seed: int = 0) -> CheckResult:
    torch.manual_seed(seed)
    x = torch.randn(2, 16, 5, 7)
    bad = float((pixel_unshuffle(pixel_shuffle(x)) - x).abs().max())
    bad += float((pixel_shuffle(x) - torch.nn.functional.pixel_shuffle(x, 2)).abs().max())
    return CheckResult("pixel_shuffle_bijection", bad == 0.0, bad, 0.0)


def degradation_check(plates: int = 10, seed: int = 0) -> CheckResult:
    from lpsr.data import DataConfig, make_sample, _sample_seed

    t0 = time.perf_counter()
    rng = np.random.default_rng([seed, 17])
    worst = 0.0
    for i in range(plates):
        layout = ("brazilian", "mercosur")[i % 2]
        label = LpLabel(LAYOUTS[layout].random_text(rng), layout)
        sample, _ = make_sample(f"{i}", label, _sample_seed(seed, i), DataConfig())
        worst = max(worst, sample.degradation_ssim)
    return CheckResult("degradation_below_0.1", worst < 0.1, worst, 0.1, f"plates={plates}", time.perf_counter() - t0)


def all_checks(seed: int = 0) -> list[Callable[[], CheckResult | list[CheckResult]]]:
    return [
        lambda: gradient_check("classification", seed=seed),
        lambda: gradient_check("layout_soft", seed=seed),
        lambda: gradient_check("dissimilarity", seed=seed),
        lambda: gradient_check("composite", seed=seed),
        lambda: ssim_oracle_check(seed=seed),
        lambda: ssim_identity_check(seed=seed),
        lambda: layout_oracle_check(seed=seed),
        lambda: soft_hard_agreement_check(seed=seed),
        closed_form_check,
        lambda: deformable_degeneracy_check(seed=seed),
        weight_update_check,
        steplr_check,
        lambda: recognition_oracle_check(seed=seed),
        lambda: pixel_shuffle_check(seed=seed),
        lambda: degradation_check(seed=seed),
    ]


def run(seed: int = 0, emit: Callable[[str], None] = print) -> list[CheckResult]:
    results = []
    for check in all_checks(seed):
        t0 = time.perf_counter()
        out = check()
        for r in out if isinstance(out, list) else [out]:
            r.seconds = r.seconds or time.perf_counter() - t0
            emit(r.line())
            results.append(r)
    return results
