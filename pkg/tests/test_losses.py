import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from segkit import tensor as ts
from segkit.losses import (LossConfig, compute_soft_region_stats, cross_entropy,
                           iou_loss_multiclass, lp_ln_hinge, lp_ln_linear, one_hot, seg_loss)
from segkit.metrics import ConfusionMatrix, mean_iou
from segkit.tensor import ShapeError, Tensor

# the score row used for the hand-evaluated sample-loss fixtures; GT is the middle class
PR = [-1.2, 2.9, 7.1]
GT = [0.0, 1.0, 0.0]
TWO = np.array([[0.8, 0.2], [0.4, 0.6]])
TWO_LABELS = np.array([0, 1])


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# --- cross-entropy ---------------------------------------------------------------

def test_ce_uniform_is_log_c():
    assert float(cross_entropy(T(np.zeros((4, 5))), [0, 1, 2, 3]).data) == pytest.approx(math.log(5))


def test_ce_peaked_is_zero():
    z = np.full((3, 5), -1e3)
    z[np.arange(3), [4, 0, 2]] = 1e3
    assert float(cross_entropy(T(z), [4, 0, 2]).data) < 1e-12


def test_ce_fixture_against_oracle():
    expect = oracles.cross_entropy([PR], [2])
    got = float(cross_entropy(T([PR]), [2]).data)
    assert got == pytest.approx(expect, abs=1e-12)
    # the rounded figure quoted for this row is -ln(0.985)
    assert got == pytest.approx(0.0149, abs=1e-3)


def test_ce_rejects_bad_labels():
    with pytest.raises(ValueError):
        cross_entropy(T(np.zeros((2, 3))), [0, 3])
    with pytest.raises(ShapeError):
        cross_entropy(T(np.zeros((2, 3))), [0])


@given(hnp.arrays(np.float64, (6, 4), elements=st.floats(-20, 20)),
       hnp.arrays(np.int64, (6,), elements=st.integers(0, 3)))
def test_ce_matches_oracle_property(z, y):
    assert float(cross_entropy(T(z), y).data) == pytest.approx(
        oracles.cross_entropy(z.tolist(), y.tolist()), rel=1e-9, abs=1e-12)


# --- IoU loss --------------------------------------------------------------------

def test_iou_fixture():
    expect = oracles.soft_iou_loss(TWO.tolist(), TWO_LABELS.tolist(), 2)
    assert expect == pytest.approx(1 - (0.8 / 1.4 + 0.6 / 1.2) / 2, abs=1e-15)
    got = float(iou_loss_multiclass(T(TWO), one_hot(TWO_LABELS, 2)).data)
    assert got == pytest.approx(expect, abs=1e-12)
    assert got == pytest.approx(0.4643, abs=1e-3)


def test_iou_uniform_balanced_is_two_thirds():
    probs = np.full((4, 2), 0.5)
    got = float(iou_loss_multiclass(T(probs), one_hot([0, 0, 1, 1], 2)).data)
    assert got == pytest.approx(2 / 3, abs=1e-12)


def test_iou_perfect_is_zero():
    oh = one_hot([0, 2, 1, 2], 4)  # class 3 absent everywhere: counts as perfect
    assert float(iou_loss_multiclass(T(oh), oh).data) == 0.0


def test_iou_rejects_unnormalised_rows():
    with pytest.raises(ValueError):
        iou_loss_multiclass(T([[0.5, 0.6]]), one_hot([0], 2))


def _probs(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


@given(hnp.arrays(np.float64, (8, 3), elements=st.floats(-6, 6)),
       hnp.arrays(np.int64, (8,), elements=st.integers(0, 2)))
def test_iou_in_unit_interval_and_matches_oracle(z, y):
    p = _probs(z)
    got = float(iou_loss_multiclass(T(p), one_hot(y, 3)).data)
    assert 0.0 <= got <= 1.0
    assert got == pytest.approx(oracles.soft_iou_loss(p.tolist(), y.tolist(), 3), abs=1e-12)


@given(hnp.arrays(np.int64, (30,), elements=st.integers(0, 4)),
       hnp.arrays(np.int64, (30,), elements=st.integers(0, 4)))
def test_hard_iou_matches_confusion_path(gt, pred):
    cm = ConfusionMatrix(5).accumulate(gt, pred)
    per_class = cm.per_class_iou()
    # zero-union classes are vacuously perfect in the loss; match that here
    hard = np.where(np.isnan(per_class), 1.0, per_class).mean()
    loss = float(iou_loss_multiclass(T(one_hot(pred, 5)), one_hot(gt, 5)).data)
    assert abs((1 - loss) - hard) < 1e-10
    if not np.isnan(per_class).any():
        assert abs((1 - loss) - mean_iou(cm, exclude_background=False)[0]) < 1e-10


# --- soft region stats -------------------------------------------------------------

def test_stats_fixture():
    s = compute_soft_region_stats(TWO, one_hot(TWO_LABELS, 2))
    wp, wn = oracles.region_weights(TWO.tolist(), TWO_LABELS.tolist(), 0)
    assert s.intersection[0] == pytest.approx(0.8)
    assert s.union[0] == pytest.approx(1.4)
    assert s.w_pos[0] == pytest.approx(wp, abs=1e-12)
    assert s.w_neg[0] == pytest.approx(wn, abs=1e-12)
    assert s.w_pos[0] == pytest.approx(0.7143, abs=1e-3)
    assert s.w_neg[0] == pytest.approx(0.4082, abs=1e-3)


def test_stats_perfect_prediction():
    y = [0, 0, 1, 2, 2, 2]
    s = compute_soft_region_stats(one_hot(y, 3), one_hot(y, 3))
    np.testing.assert_allclose(s.intersection, [2, 1, 3])
    np.testing.assert_allclose(s.w_pos, [1 / 2, 1, 1 / 3])
    np.testing.assert_allclose(s.w_neg, [1 / 2, 1, 1 / 3])


def test_stats_degenerate_class_gets_zero_weight():
    s = compute_soft_region_stats(one_hot([0, 1], 3), one_hot([0, 1], 3))
    assert s.union[2] == 0 and s.w_pos[2] == 0 and s.w_neg[2] == 0


def test_stats_reject_empty():
    with pytest.raises(ValueError):
        compute_soft_region_stats(np.zeros((0, 3)), np.zeros((0, 3)))


@given(hnp.arrays(np.float64, (10, 4), elements=st.floats(-5, 5)),
       hnp.arrays(np.int64, (10,), elements=st.integers(0, 3)))
def test_stats_wn_never_exceeds_wp(z, y):
    s = compute_soft_region_stats(_probs(z), one_hot(y, 4))
    assert np.all(s.intersection <= s.union + 1e-12)
    assert np.all(s.w_neg <= s.w_pos + 1e-12)


@given(st.floats(0.5, 10), st.floats(0, 1), st.floats(0, 1))
def test_wn_monotone_in_intersection(f, a, b):
    # equal unions: the smaller intersection must give the smaller weight
    g1, g2 = sorted((a * f, b * f))
    assert g1 / f ** 2 <= g2 / f ** 2


# --- sample terms --------------------------------------------------------------------

def test_hinge_fixtures():
    lp, ln = lp_ln_hinge(PR, GT, 2, 1.0)
    assert (lp, ln) == pytest.approx(oracles.hinge_terms(PR, 1, 2, 1.0))
    assert lp == pytest.approx(5.2, abs=1e-3)
    assert ln == pytest.approx(5.2, abs=1e-3)


def test_hinge_saturates_when_correct_by_margin():
    lp, ln = lp_ln_hinge([0.0, 5.0, 1.0], GT, 2, 1.0)
    assert lp == 0.0 and ln == 0.0


def test_hinge_zeroes_rather_than_removes_gt_entry():
    # all non-GT scores negative: the masked max is the zeroed GT slot
    lp, _ = lp_ln_hinge([-3.0, -1.0, -2.0], GT, 0, 0.0)
    assert lp == pytest.approx(0.0 - (-1.0))


def test_linear_fixtures():
    lp, ln = lp_ln_linear(PR, GT, 2, 0.0)
    assert (lp, ln) == pytest.approx(oracles.linear_terms(PR, 1, 2, 0.0))
    assert lp == pytest.approx(-2.9, abs=1e-3)
    assert ln == pytest.approx(7.1, abs=1e-3)
    assert lp_ln_linear([0.0, 5.0, 1.0], GT, 2, 1.0)[1] == 0.0


# --- segmentation loss -------------------------------------------------------------------

def _oracle_seg(scores, labels, stats, variant, g):
    terms = oracles.hinge_terms if variant == "hinge" else oracles.linear_terms
    return oracles.seg_loss(scores.tolist(), list(labels), stats.w_pos.tolist(),
                            stats.w_neg.tolist(), terms, g)


def test_seg_single_sample_hand_value():
    scores = np.array([[2.0, -1.0]])
    p = _probs(scores)
    stats = compute_soft_region_stats(p, one_hot([1], 2))
    # class 0: g=0, f=p0.  class 1: g=p1, f=1
    wp0, wn0 = 1 / p[0, 0], 0.0
    wp1, wn1 = 1.0, p[0, 1]
    lp = 1.0  # -score_gt = -(-1)
    ln0 = 2.0  # -1 > 2 fails, so L_n = score_0
    expect = (wp1 * lp + wn0 * ln0) / (wp0 + wn0 + wp1 + wn1)
    got = float(seg_loss(T(scores), [1], stats, LossConfig("segmentation", "linear", 0.0)).data)
    assert got == pytest.approx(expect, abs=1e-12)


def test_seg_negative_when_everything_correct():
    scores = np.array([[5.0, 1.0], [0.5, 4.0], [6.0, -2.0]])
    y = [0, 1, 0]
    stats = compute_soft_region_stats(_probs(scores), one_hot(y, 2))
    val = float(seg_loss(T(scores), y, stats, LossConfig("segmentation", "linear", 0.0)).data)
    assert val < 0


@pytest.mark.parametrize("variant,g", [("hinge", 1.0), ("hinge", 0.1), ("linear", 0.0),
                                       ("linear", 1.0)])
def test_seg_matches_double_sum_oracle(rng, variant, g):
    scores = rng.normal(size=(12, 4)) * 2
    y = rng.integers(0, 4, 12)
    stats = compute_soft_region_stats(_probs(scores), one_hot(y, 4))
    got = float(seg_loss(T(scores), y, stats, LossConfig("segmentation", variant, g)).data)
    assert got == pytest.approx(_oracle_seg(scores, y, stats, variant, g), abs=1e-12)


@given(hnp.arrays(np.float64, (7, 3), elements=st.floats(-4, 4)),
       hnp.arrays(np.int64, (7,), elements=st.integers(0, 2)),
       st.sampled_from(["hinge", "linear"]), st.floats(0.1, 100))
def test_seg_scale_invariant_in_weights(s, y, variant, factor):
    stats = compute_soft_region_stats(_probs(s), one_hot(y, 3))
    cfg = LossConfig("segmentation", variant, 0.5)
    a = float(seg_loss(T(s), y, stats, cfg).data)
    b = float(seg_loss(T(s), y, stats.scaled(factor), cfg).data)
    assert a == pytest.approx(b, rel=1e-9, abs=1e-12)


def test_seg_gradient_does_not_flow_through_stats(rng):
    s = T(rng.normal(size=(6, 3)))
    y = rng.integers(0, 3, 6)
    stats = compute_soft_region_stats(ts.softmax(s, axis=1), one_hot(y, 3))
    with ts.Tape():
        loss = seg_loss(s, y, stats, LossConfig())
        ts.backward(loss)
    assert s.grad is not None and s.grad.shape == s.shape


def test_seg_rejects_stats_mismatch(rng):
    s = rng.normal(size=(4, 3))
    stats = compute_soft_region_stats(_probs(rng.normal(size=(4, 2))), one_hot([0, 1, 0, 1], 2))
    with pytest.raises(ShapeError):
        seg_loss(T(s), [0, 1, 2, 0], stats, LossConfig())


def test_seg_background_flag(rng):
    s = rng.normal(size=(8, 3))
    y = rng.integers(0, 3, 8)
    stats = compute_soft_region_stats(_probs(s), one_hot(y, 3))
    a = float(seg_loss(T(s), y, stats, LossConfig(include_background=True)).data)
    b = float(seg_loss(T(s), y, stats, LossConfig(include_background=False)).data)
    wp, wn = stats.w_pos.copy(), stats.w_neg.copy()
    wp[0] = wn[0] = 0
    exp_b = oracles.seg_loss(s.tolist(), y.tolist(), wp.tolist(), wn.tolist(),
                             oracles.linear_terms, 0.0)
    assert b == pytest.approx(exp_b, abs=1e-12)
    assert a != b


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig("dice")
    with pytest.raises(ValueError):
        LossConfig(variant="square")
    with pytest.raises(ValueError):
        LossConfig(margin_g=-0.1)
