"""Loss family values, gradients against finite differences, feedback clamp."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csibts.layers import softmax
from csibts.losses import (CenterNotInitializedError, FeedbackSignal,
                           LossWeights, PROB_FLOOR, compute_feedback,
                           cross_entropy, ctq, ctq_grad, ctve, ctve_grad,
                           init_center, outlier_distance, soft_target, tce,
                           tce_grad, total_losses, uice_student,
                           uice_student_grad, uice_teacher, uice_teacher_grad)
from csibts.nets import (PrimalConfig, PsiConfig, init_primal, init_psi,
                         primal_forward, psi_forward)

from oracles import numeric_gradient, rel_err


def onehot(labels, c=4):
    eye = np.eye(c)
    return eye[np.asarray(labels)]


# ---------------------------------------------------------------------------
# targets and plain values
# ---------------------------------------------------------------------------

def test_soft_target_zero_xi_is_softmax_of_base():
    y = onehot([0, 2])
    got = soft_target(y, np.zeros(4))
    np.testing.assert_allclose(got, softmax(y), rtol=0, atol=1e-15)


def test_soft_target_rows_normalized_and_shifted():
    rng = np.random.default_rng(3)
    base = rng.random((5, 4))
    xi = np.array([0.5, -1.0, 0.25, 0.0])
    got = soft_target(base, xi)
    np.testing.assert_allclose(got.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(got, softmax(base + xi), atol=1e-15)


def test_cross_entropy_matches_hand_computation():
    probs = np.array([[0.7, 0.1, 0.1, 0.1], [0.25, 0.25, 0.25, 0.25]])
    target = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
    want = -(np.log(0.7) + np.log(0.25)) / 2.0
    assert cross_entropy(probs, target) == pytest.approx(want, rel=1e-12)


def test_cross_entropy_floors_zero_probabilities():
    probs = np.array([[0.0, 1.0]])
    target = np.array([[1.0, 0.0]])
    assert cross_entropy(probs, target) == pytest.approx(-np.log(PROB_FLOOR))


def test_tce_equals_ce_against_shaped_target():
    rng = np.random.default_rng(4)
    logits = rng.standard_normal((6, 4))
    probs = softmax(logits)
    y = onehot(rng.integers(0, 4, size=6))
    xi = np.array([1.0, 0.4, -0.2, -1.0])
    assert tce(probs, y, xi) == pytest.approx(
        cross_entropy(probs, soft_target(y, xi)), rel=1e-12)


def test_uice_teacher_scales_with_feedback():
    rng = np.random.default_rng(5)
    probs = softmax(rng.standard_normal((8, 4)))
    pseudo = softmax(rng.standard_normal((8, 4)))
    xi = np.array([0.3, 0.1, -0.5, 0.0])
    base = uice_student(probs, pseudo, xi)
    assert uice_teacher(probs, pseudo, xi, 0.0) == 0.0
    assert uice_teacher(probs, pseudo, xi, 0.37) == pytest.approx(0.37 * base, rel=1e-12)
    np.testing.assert_allclose(
        uice_teacher_grad(probs, pseudo, xi, 0.37),
        0.37 * uice_student_grad(probs, pseudo, xi), atol=1e-15)


# ---------------------------------------------------------------------------
# gradients against central differences
# ---------------------------------------------------------------------------

def _check_logit_grad(loss_of_logits, grad_of_logits, n_probes=24, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_probes):
        logits = rng.standard_normal((3, 4)) * rng.uniform(0.5, 2.0)
        analytic = grad_of_logits(logits)
        numeric = numeric_gradient(lambda: loss_of_logits(logits), logits)
        worst = max(worst, rel_err(numeric, analytic))
    assert worst <= 1e-7


def test_tce_grad_matches_fd():
    rng = np.random.default_rng(11)
    y = onehot(rng.integers(0, 4, size=3))
    xi = np.array([0.8, 0.2, -0.1, -0.6])
    _check_logit_grad(lambda lg: tce(softmax(lg), y, xi),
                      lambda lg: tce_grad(softmax(lg), y, xi), seed=11)


def test_uice_teacher_grad_matches_fd():
    rng = np.random.default_rng(12)
    pseudo = softmax(rng.standard_normal((3, 4)))
    xi = np.array([0.5, -0.3, 0.0, 0.2])
    fb = 0.73
    _check_logit_grad(lambda lg: uice_teacher(softmax(lg), pseudo, xi, fb),
                      lambda lg: uice_teacher_grad(softmax(lg), pseudo, xi, fb),
                      seed=12)


def test_uice_student_grad_matches_fd():
    rng = np.random.default_rng(13)
    pseudo = softmax(rng.standard_normal((3, 4)))
    xi = np.array([-0.4, 0.9, 0.1, 0.0])
    _check_logit_grad(lambda lg: uice_student(softmax(lg), pseudo, xi),
                      lambda lg: uice_student_grad(softmax(lg), pseudo, xi),
                      seed=13)


def test_unclipped_ce_grad_is_probs_minus_target():
    rng = np.random.default_rng(14)
    logits = rng.standard_normal((5, 4))
    probs = softmax(logits)
    y = onehot(rng.integers(0, 4, size=5))
    xi = np.zeros(4)
    target = soft_target(y, xi)
    np.testing.assert_allclose(tce_grad(probs, y, xi),
                               (probs - target) / 5.0, atol=1e-12)


def test_ctq_grad_matches_fd_and_is_antisymmetric():
    rng = np.random.default_rng(15)
    worst = 0.0
    for _ in range(20):
        a = rng.standard_normal((4, 6))
        b = rng.standard_normal((4, 6))
        da, db = ctq_grad(a, b)
        np.testing.assert_allclose(da, -db, atol=1e-15)
        worst = max(worst, rel_err(numeric_gradient(lambda: ctq(a, b), a), da))
        worst = max(worst, rel_err(numeric_gradient(lambda: ctq(a, b), b), db))
    assert worst <= 1e-8


def test_ctve_grad_matches_fd():
    rng = np.random.default_rng(16)
    center = rng.standard_normal(6)
    worst = 0.0
    for _ in range(20):
        a = rng.standard_normal((4, 6))
        analytic = ctve_grad(a, center)
        numeric = numeric_gradient(lambda: ctve(a, center), a)
        worst = max(worst, rel_err(numeric, analytic))
    assert worst <= 1e-8


# ---------------------------------------------------------------------------
# feedback
# ---------------------------------------------------------------------------

def test_feedback_positive_when_labels_gain_mass():
    y = onehot([0, 1])
    before = np.array([[0.5, 0.5, 0.0, 0.0], [0.25, 0.25, 0.25, 0.25]])
    after = np.array([[0.8, 0.2, 0.0, 0.0], [0.1, 0.6, 0.2, 0.1]])
    want = (np.log(0.8) + np.log(0.6)) / 2 - (np.log(0.5) + np.log(0.25)) / 2
    assert compute_feedback(before, after, y) == pytest.approx(want, rel=1e-12)


def test_feedback_clamped_at_zero_on_regression():
    y = onehot([2])
    before = np.array([[0.1, 0.1, 0.7, 0.1]])
    after = np.array([[0.3, 0.3, 0.2, 0.2]])
    assert compute_feedback(before, after, y) == 0.0


def test_feedback_zero_for_identical_snapshots():
    probs = softmax(np.random.default_rng(17).standard_normal((6, 4)))
    y = onehot([0, 1, 2, 3, 0, 1])
    assert compute_feedback(probs, probs.copy(), y) == 0.0


def test_feedback_is_batch_mean_not_sum():
    y = onehot([0, 0])
    before = np.full((2, 4), 0.25)
    after = np.array([[0.5, 0.5 / 3, 0.5 / 3, 0.5 / 3]] * 2)
    one = compute_feedback(before[:1], after[:1], y[:1])
    two = compute_feedback(before, after, y)
    assert two == pytest.approx(one, rel=1e-12)


def test_feedback_signal_rejects_negative():
    FeedbackSignal(ps=0.0, ds=1.0)
    with pytest.raises(ValueError):
        FeedbackSignal(ps=-0.1, ds=0.0)


# ---------------------------------------------------------------------------
# consistency terms, center, distances
# ---------------------------------------------------------------------------

def test_ctq_zero_for_identical_projections():
    a = np.random.default_rng(18).standard_normal((5, 8))
    assert ctq(a, a.copy()) == 0.0


def test_ctq_example_value():
    a = np.zeros((2, 3))
    b = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    assert ctq(a, b) == pytest.approx((1.0 + 4.0) / 2.0)


def test_ctq_rejects_shape_mismatch():
    with pytest.raises(ValueError, match="shapes differ"):
        ctq(np.zeros((2, 3)), np.zeros((3, 3)))


def test_ctve_requires_center():
    with pytest.raises(CenterNotInitializedError):
        ctve(np.zeros((2, 3)), None)
    with pytest.raises(CenterNotInitializedError):
        outlier_distance(np.zeros((2, 3)), None)


def test_outlier_distance_per_sample_and_scalar():
    center = np.array([1.0, 0.0])
    proj = np.array([[1.0, 0.0], [3.0, 0.0], [1.0, 2.0]])
    np.testing.assert_allclose(outlier_distance(proj, center), [0.0, 4.0, 4.0])
    scalar = outlier_distance(np.array([0.0, 0.0]), center)
    assert isinstance(scalar, float) and scalar == pytest.approx(1.0)


def test_ctve_is_mean_outlier_distance():
    rng = np.random.default_rng(19)
    proj = rng.standard_normal((7, 5))
    center = rng.standard_normal(5)
    assert ctve(proj, center) == pytest.approx(
        float(np.mean(outlier_distance(proj, center))), rel=1e-12)


def test_init_center_matches_direct_mean_and_is_frozen():
    rng = np.random.default_rng(20)
    pcfg = PrimalConfig(n_features=6, tau=4, d_model=8, n_heads=2, n_blocks=1,
                        d_ff=16, n_classes=4)
    psicfg = PsiConfig(dims=(8, 8, 5))
    pp = init_primal(rng, pcfg)
    sp = init_psi(rng, psicfg)
    chunks = [rng.standard_normal((3, 4, 6)), rng.standard_normal((2, 4, 6))]
    center = init_center(sp, psicfg, pp, pcfg, iter(chunks))
    stacked = np.concatenate(chunks)
    out, _ = primal_forward(pp, pcfg, stacked)
    proj, _ = psi_forward(sp, psicfg, out.z)
    np.testing.assert_allclose(center, proj.mean(axis=0), atol=1e-12)
    with pytest.raises(ValueError):
        center[0] = 0.0


def test_init_center_rejects_empty_stream():
    rng = np.random.default_rng(21)
    pcfg = PrimalConfig(n_features=6, tau=4, d_model=8, n_heads=2, n_blocks=1,
                        d_ff=16, n_classes=4)
    psicfg = PsiConfig(dims=(8, 5))
    with pytest.raises(ValueError, match="zero unlabeled"):
        init_center(init_psi(rng, psicfg), psicfg, init_primal(rng, pcfg), pcfg, iter([]))


# ---------------------------------------------------------------------------
# totals and weights
# ---------------------------------------------------------------------------

def test_total_losses_default_weights_arithmetic():
    comps = {k: 1.0 for k in ("tce_pt", "uice_pt", "ctq", "ctve",
                              "tce_dt", "uice_dt", "uice_ps", "uice_ds")}
    totals = total_losses(comps, LossWeights())
    assert totals.l_pt == pytest.approx(0.1 + 2.0 + 1.0 + 0.5)
    assert totals.l_dt == pytest.approx(0.1 + 2.0 + 1.0)
    assert totals.l_ps == 1.0 and totals.l_ds == 1.0


def test_total_losses_weighted_combination():
    comps = dict(tce_pt=2.0, uice_pt=3.0, ctq=5.0, ctve=7.0,
                 tce_dt=1.5, uice_dt=2.5, uice_ps=0.5, uice_ds=0.25)
    w = LossWeights(lambda1=1.0, lambda2=0.5, lambda3=2.0, lambda4=4.0)
    totals = total_losses(comps, w)
    assert totals.l_pt == pytest.approx(2.0 + 1.5 + 10.0 + 28.0)
    assert totals.l_dt == pytest.approx(1.5 + 1.25 + 10.0)
    assert totals.l_ps == 0.5 and totals.l_ds == 0.25


def test_loss_weights_reject_negative():
    with pytest.raises(ValueError, match="lambda3"):
        LossWeights(lambda3=-0.5)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 5.0), st.integers(0, 3))
def test_uice_teacher_nonnegative_and_linear_in_feedback(fb, label):
    rng = np.random.default_rng(label)
    probs = softmax(rng.standard_normal((4, 4)))
    pseudo = softmax(rng.standard_normal((4, 4)))
    xi = np.array([1.0, 0.3, -0.2, -1.0])
    value = uice_teacher(probs, pseudo, xi, fb)
    assert value >= 0.0
    assert value == pytest.approx(fb * uice_student(probs, pseudo, xi), rel=1e-9, abs=1e-12)
