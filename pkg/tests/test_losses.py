import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from lpsr.alphabet import ALPHABET, LAYOUTS
from lpsr.losses import (
    ConfusionMatrix,
    ConfusionRule,
    LossConfig,
    PenaltyWeights,
    argmax_decode,
    classification_loss,
    dissimilarity_loss,
    layout_penalty,
    lcofl,
    one_hot_probs,
    ssim,
    update_penalty_weights,
)
from lpsr.oracles import layout_penalty_reference, ssim_reference


def enc(text):
    return torch.tensor(ALPHABET.encode(text))


def uniform(k=7):
    return torch.full((k, 36), 1 / 36, dtype=torch.float64)


# classification loss

def test_one_hot_correct_probs_give_near_zero():
    assert float(classification_loss(one_hot_probs(ALPHABET.encode("ABC1234")), enc("ABC1234"))) <= 1e-6


def test_uniform_probs_give_ln36():
    assert float(classification_loss(uniform(), enc("ABC1234"))) == pytest.approx(math.log(36), abs=1e-12)


def test_raised_weight_for_a_class_seen_once():
    w = torch.ones(36, dtype=torch.float64)
    w[ALPHABET.class_of("A")] = 1.5
    expected = math.log(36) * (7 + 0.5) / 7
    assert float(classification_loss(uniform(), enc("ABC1234"), w)) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(3.8395, abs=1e-4)


def test_classification_length_mismatch():
    with pytest.raises(ValueError):
        classification_loss(uniform(6), enc("ABC1234"))


def test_classification_accepts_penalty_weights_object():
    w = PenaltyWeights.ones()
    assert float(classification_loss(uniform(), enc("ABC1234"), w)) == pytest.approx(math.log(36))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 35), st.floats(1.0, 5.0), st.integers(0, 10_000))
def test_classification_is_affine_in_one_weight(c, wc, seed):
    g = torch.Generator().manual_seed(seed)
    probs = torch.softmax(torch.randn(3, 7, 36, generator=g, dtype=torch.float64), -1)
    gt = torch.randint(0, 36, (3, 7), generator=g)
    gt[0, 0] = c
    w = torch.ones(36, dtype=torch.float64)

    def loss(v):
        ww = w.clone()
        ww[c] = v
        return float(classification_loss(probs, gt, ww))

    # L(w_c) = A + w_c * B: doubling w_c doubles the c-positions' contribution
    b = loss(1.0) - loss(0.0)
    assert loss(2 * wc) - loss(0.0) == pytest.approx(2 * (loss(wc) - loss(0.0)), rel=1e-10, abs=1e-12)
    assert loss(wc) - loss(0.0) == pytest.approx(wc * b, rel=1e-10, abs=1e-12)


# layout penalty

def test_layout_penalty_no_misplacement():
    assert float(layout_penalty(one_hot_probs(ALPHABET.encode("ABC1234")), enc("ABC1234"), 1.0, "hard")) == 0.0


def test_layout_penalty_single_digit_at_letter_position():
    p = one_hot_probs(ALPHABET.encode("AB81234"))
    assert float(layout_penalty(p, enc("ABC1234"), 1.0, "hard")) == 1.0
    assert float(layout_penalty(p, enc("ABC1234"), 1.0, "soft")) == 1.0


def test_layout_penalty_two_misplacements_mercosur():
    p = one_hot_probs(ALPHABET.encode("4BC1D2Z"))
    assert float(layout_penalty(p, enc("ABC1D23"), 1.0, "hard")) == 2.0
    assert layout_penalty_reference("4BC1D2Z", "ABC1D23", 1.0) == 2.0


def test_layout_penalty_soft_uniform_mass():
    # letters at 3 positions see 10/36 digit mass; digits at 4 positions see 26/36 letter mass
    assert float(layout_penalty(uniform(), enc("ABC1234"), 1.0, "soft")) == pytest.approx(134 / 36, abs=1e-12)


def test_layout_penalty_rejects_bad_mode_and_beta():
    with pytest.raises(ValueError):
        layout_penalty(uniform(), enc("ABC1234"), 1.0, "fuzzy")
    with pytest.raises(ValueError):
        layout_penalty(uniform(), enc("ABC1234"), -1.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 35), min_size=7, max_size=7), st.sampled_from(sorted(LAYOUTS)), st.integers(0, 10**6),
       st.floats(0.0, 3.0))
def test_soft_equals_hard_on_one_hot(pred, layout, seed, beta):
    gt = enc(LAYOUTS[layout].random_text(np.random.default_rng(seed)))
    p = one_hot_probs(pred)
    assert float(layout_penalty(p, gt, beta, "soft")) == pytest.approx(float(layout_penalty(p, gt, beta, "hard")), abs=1e-12)


# ssim and dissimilarity

def test_ssim_identity(rng):
    x = torch.from_numpy(rng.random((3, 32, 96)))
    assert float(ssim(x, x)) == pytest.approx(1.0, abs=1e-9)


def test_ssim_symmetry(rng):
    for _ in range(5):
        a, b = (torch.from_numpy(rng.random((3, 32, 96))) for _ in range(2))
        assert abs(float(ssim(a, b)) - float(ssim(b, a))) < 1e-9


def test_ssim_shape_mismatch():
    with pytest.raises(ValueError):
        ssim(torch.zeros(3, 32, 96), torch.zeros(3, 32, 95))


def test_ssim_independent_noise_near_zero():
    vals = []
    for seed in range(20):
        r = np.random.default_rng(seed)
        a, b = r.random((32, 96, 3)), r.random((32, 96, 3))
        v = float(ssim(torch.from_numpy(a).permute(2, 0, 1), torch.from_numpy(b).permute(2, 0, 1)))
        assert v == pytest.approx(ssim_reference(a, b), abs=1e-9)
        vals.append(v)
    assert abs(np.mean(vals)) < 0.1
    assert max(abs(v) for v in vals) < 0.1


def test_ssim_batch_returns_per_image(rng):
    a = torch.from_numpy(rng.random((4, 3, 32, 96)))
    out = ssim(a, a)
    assert out.shape == (4,)
    assert torch.allclose(out, torch.ones(4, dtype=out.dtype))


def test_dissimilarity_identical_is_zero(rng):
    x = torch.from_numpy(rng.random((3, 32, 96)))
    assert float(dissimilarity_loss(x, x)) == pytest.approx(0.0, abs=1e-12)


def test_dissimilarity_of_anticorrelated_patterns_is_one():
    yy, xx = np.mgrid[:32, :96]
    p = np.where((yy + xx) % 2 == 0, 0.5, -0.5)[None].repeat(3, 0)
    a, b = torch.from_numpy(0.5 + p), torch.from_numpy(0.5 - p)
    c2 = 0.03**2
    # luminance and contrast terms are exactly 1; the structure term is (c2 - 2s^2) / (c2 + 2s^2)
    expected = (1 - (c2 - 0.5) / (c2 + 0.5)) / 2
    got = float(dissimilarity_loss(a, b))
    assert got == pytest.approx(expected, abs=1e-9)
    assert got == pytest.approx(1.0, abs=2e-3)
    assert got == pytest.approx((1 - ssim_reference(a.permute(1, 2, 0).numpy(), b.permute(1, 2, 0).numpy())) / 2, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_dissimilarity_in_unit_interval(seed):
    r = np.random.default_rng(seed)
    a, b = (torch.from_numpy(r.random((2, 3, 32, 96)) ** r.uniform(0.2, 5)) for _ in range(2))
    assert 0.0 <= float(dissimilarity_loss(a, b)) <= 1.0


# composite

def test_lcofl_perfect_prediction_is_zero(rng):
    hr = torch.from_numpy(rng.random((3, 32, 96)))
    parts = lcofl(one_hot_probs(ALPHABET.encode("ABC1234")), enc("ABC1234"), hr, hr)
    assert float(parts.total) < 1e-5


def test_lcofl_uniform_components(rng):
    hr = torch.from_numpy(rng.random((3, 32, 96)))
    parts = lcofl(uniform(), enc("ABC1234"), hr, hr, None, 1.0)
    assert float(parts.l_c) == pytest.approx(math.log(36), abs=1e-12)
    assert float(parts.l_p) == pytest.approx(134 / 36, abs=1e-12)
    assert float(parts.l_s) == 0.0
    assert float(parts.total) == float(parts.l_c) + float(parts.l_p) + float(parts.l_s)


def test_lcofl_without_layout_term(rng):
    hr = torch.from_numpy(rng.random((3, 32, 96)))
    parts = lcofl(uniform(), enc("ABC1234"), hr, hr, use_layout=False)
    assert float(parts.l_p) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_total_at_least_structural_term(seed):
    g = torch.Generator().manual_seed(seed)
    probs = torch.softmax(torch.randn(2, 7, 36, generator=g, dtype=torch.float64) * 3, -1)
    gt = torch.randint(0, 36, (2, 7), generator=g)
    sr, hr = torch.rand(2, 2, 3, 32, 96, generator=g, dtype=torch.float64)
    w = 1 + 4 * torch.rand(36, generator=g, dtype=torch.float64)
    parts = lcofl(probs, gt, sr, hr, w, 1.0)
    assert float(parts.total) >= float(parts.l_s)
    assert float(parts.total) == float(parts.l_c + parts.l_p + parts.l_s)


# penalty weights

def test_penalty_weights_validation():
    with pytest.raises(ValueError):
        PenaltyWeights(np.full(36, 0.5))
    with pytest.raises(ValueError):
        PenaltyWeights(np.full(36, 6.0), w_max=5.0)
    w = PenaltyWeights.ones()
    with pytest.raises(ValueError):
        w.values[0] = 2.0


def test_confusion_matrix_total_matches_positions(rng):
    gt = rng.integers(0, 36, (10, 7))
    pred = rng.integers(0, 36, (10, 7))
    cm = ConfusionMatrix.from_indices(gt, pred)
    assert cm.total == 70
    assert (cm.counts >= 0).all()


def test_diagonal_confusion_leaves_weights():
    w = PenaltyWeights(np.linspace(1, 3, 36))
    out = update_penalty_weights(w, ConfusionMatrix(np.diag(np.arange(36) + 7)), 0.1)
    assert np.array_equal(out.values, w.values)


def test_s_confused_with_5():
    s, five = ALPHABET.class_of("S"), ALPHABET.class_of("5")
    counts = np.zeros((36, 36), dtype=np.int64)
    counts[s, five], counts[s, s] = 40, 10
    out = update_penalty_weights(PenaltyWeights.ones(), ConfusionMatrix(counts), 0.1, ConfusionRule(5, 0.1))
    expected = np.ones(36)
    expected[s] = 1.1
    assert np.allclose(out.values, expected, atol=0, rtol=1e-15)


def test_rare_confusion_below_rule_is_ignored():
    s, five = ALPHABET.class_of("S"), ALPHABET.class_of("5")
    counts = np.zeros((36, 36), dtype=np.int64)
    counts[s, s], counts[s, five] = 96, 4  # under the absolute minimum of 5
    out = update_penalty_weights(PenaltyWeights.ones(), ConfusionMatrix(counts), 0.1)
    assert np.array_equal(out.values, np.ones(36))


def test_repeated_updates_saturate():
    s, five = ALPHABET.class_of("S"), ALPHABET.class_of("5")
    counts = np.zeros((36, 36), dtype=np.int64)
    counts[s, five] = 50
    w = PenaltyWeights.ones(w_max=2.0)
    for _ in range(30):
        w = update_penalty_weights(w, ConfusionMatrix(counts), 0.3)
    assert w.values[s] == 2.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.0, 1.0))
def test_update_is_monotone_and_does_not_mutate(seed, alpha):
    r = np.random.default_rng(seed)
    w = PenaltyWeights(r.uniform(1, 5, 36))
    before = w.values.copy()
    cm = ConfusionMatrix(r.integers(0, 30, (36, 36)))
    out = update_penalty_weights(w, cm, alpha)
    assert np.array_equal(w.values, before)
    assert (out.values >= w.values).all() and (out.values <= w.w_max).all()
    again = update_penalty_weights(out, ConfusionMatrix(np.diag(r.integers(1, 9, 36))), alpha)
    assert np.array_equal(again.values, out.values)


def test_loss_config_defaults():
    cfg = LossConfig()
    assert (cfg.alpha, cfg.beta, cfg.w_max) == (0.1, 1.0, 5.0)
    assert cfg.rule == ConfusionRule(5, 0.1)


# decoding

def test_argmax_decode_one_hot():
    assert argmax_decode(one_hot_probs(ALPHABET.encode("XYZ9876"))) == "XYZ9876"


def test_argmax_tie_goes_to_lowest_index():
    p = torch.zeros(7, 36, dtype=torch.float64)
    p[:, 0] = p[:, 5] = 0.5
    assert argmax_decode(p) == "0" * 7


def test_argmax_decode_batch():
    p = torch.stack([one_hot_probs(ALPHABET.encode("ABC1234")), one_hot_probs(ALPHABET.encode("XYZ9D87"))])
    assert argmax_decode(p) == ["ABC1234", "XYZ9D87"]


def test_decode_one_hot_roundtrip_thousand_labels():
    r = np.random.default_rng(3)
    for i in range(1000):
        s = LAYOUTS[("brazilian", "mercosur")[i % 2]].random_text(r)
        assert argmax_decode(one_hot_probs(ALPHABET.encode(s))) == s
