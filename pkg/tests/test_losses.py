import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from drkd.losses import (DistillConfig, compute_loss, cross_entropy, drkd_loss, kd_loss, kl_divergence,
                         lsr_loss, one_hot, rectify)
from drkd.numeric import argmax_row, finite_diff_grad, grad_close, softmax_tau

TAUS = (1.0, 6.0, 20.0)
ALPHAS = (0.1, 0.4, 0.95)


def _batch(rng, n=4, k=5, scale=2.0):
    return rng.standard_normal((n, k)) * scale, rng.integers(0, k, size=n)


def _wrong_half(rng, n=4, k=5):
    """Teacher logits where the first half of the rows disagree with the label."""
    teacher, labels = _batch(rng, n, k)
    top = argmax_row(teacher)
    for i in range(n):
        if i < n // 2:
            labels[i] = (top[i] + 1 + rng.integers(0, k - 1)) % k
        else:
            labels[i] = top[i]
    return teacher, labels


# -- cross-entropy ------------------------------------------------------------

def test_ce_confident_correct():
    assert cross_entropy([[10.0, -10.0]], [0]).loss < 1e-8


def test_ce_uniform():
    assert cross_entropy([[0.0, 0.0]], [0]).loss == pytest.approx(math.log(2), abs=1e-15)


def test_ce_gradient_formula():
    z = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
    res = cross_entropy(z, [2, 0])
    np.testing.assert_allclose(res.grad_student_logits, (softmax_tau(z) - one_hot([2, 0], 3)) / 2)


def test_ce_finite_difference():
    rng = np.random.default_rng(0)
    for _ in range(10):
        z, y = _batch(rng)
        num = finite_diff_grad(lambda t: cross_entropy(t, y).loss, z)
        assert grad_close(cross_entropy(z, y).grad_student_logits, num, 1e-6, 1e-9)


def test_ce_shape_errors():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((3, 4)), [0, 1])
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 4)), [0, 4])


# -- KL -----------------------------------------------------------------------

def test_kl_self_is_zero():
    p = np.array([[0.2, 0.3, 0.5], [0.9, 0.05, 0.05]])
    assert kl_divergence(p, p) == 0.0


def test_kl_point_mass_vs_uniform():
    assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-15)


def test_kl_direction_is_teacher_first():
    p, q = np.array([0.9, 0.1]), np.array([0.5, 0.5])
    expected = 0.9 * math.log(0.9 / 0.5) + 0.1 * math.log(0.1 / 0.5)
    assert kl_divergence(p, q) == pytest.approx(expected, abs=1e-15)
    assert kl_divergence(q, p) != pytest.approx(expected)


def test_kl_rejects_non_stochastic():
    with pytest.raises(ValueError):
        kl_divergence([0.5, 0.6], [0.5, 0.5])
    with pytest.raises(ValueError):
        kl_divergence([0.5, 0.5], [0.5, 0.5, 0.0])


@given(arrays(np.float64, (3, 4), elements=st.floats(-10, 10)),
       arrays(np.float64, (3, 4), elements=st.floats(-10, 10)))
def test_kl_nonnegative(a, b):
    assert kl_divergence(softmax_tau(a), softmax_tau(b)) >= -1e-15


# -- Hinton KD ----------------------------------------------------------------

def test_kd_alpha_zero_is_ce_bitwise():
    rng = np.random.default_rng(1)
    z, y = _batch(rng)
    t = rng.standard_normal(z.shape)
    for scale in (False, True):
        res = kd_loss(z, t, y, DistillConfig("normal_kd", 20.0, 0.0, kd_grad_scale=scale))
        ce = cross_entropy(z, y)
        assert res.loss == ce.loss
        assert res.grad_student_logits.tobytes() == ce.grad_student_logits.tobytes()


def test_kd_alpha_one_matching_teacher():
    rng = np.random.default_rng(2)
    z, y = _batch(rng)
    res = kd_loss(z, z.copy(), y, DistillConfig("normal_kd", 6.0, 1.0))
    assert res.loss == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_allclose(res.grad_student_logits, 0.0, atol=1e-17)


def test_kd_matches_definition():
    rng = np.random.default_rng(3)
    z, y = _batch(rng)
    t = rng.standard_normal(z.shape)
    cfg = DistillConfig("normal_kd", 6.0, 0.4)
    expected = 0.6 * cross_entropy(z, y).loss + 0.4 * kl_divergence(softmax_tau(t, 6.0), softmax_tau(z, 6.0))
    assert kd_loss(z, t, y, cfg).loss == pytest.approx(expected, rel=1e-13)


def test_kd_tau_squared_scaling():
    rng = np.random.default_rng(4)
    z, y = _batch(rng)
    t = rng.standard_normal(z.shape)
    plain = kd_loss(z, t, y, DistillConfig("normal_kd", 6.0, 1.0))
    scaled = kd_loss(z, t, y, DistillConfig("normal_kd", 6.0, 1.0, kd_grad_scale=True))
    assert scaled.loss == pytest.approx(36 * plain.loss, rel=1e-13)
    np.testing.assert_allclose(scaled.grad_student_logits, 36 * plain.grad_student_logits, rtol=1e-13)


def test_kd_cifar_regime_finite_difference():
    rng = np.random.default_rng(5)
    cfg = DistillConfig("normal_kd", 20.0, 0.95)
    for _ in range(10):
        z, y = _batch(rng)
        t = rng.standard_normal(z.shape) * 3
        num = finite_diff_grad(lambda s: kd_loss(s, t, y, cfg).loss, z)
        assert grad_close(kd_loss(z, t, y, cfg).grad_student_logits, num, 1e-5, 1e-7)


@pytest.mark.parametrize("tau,alpha,scale", list(itertools.product(TAUS, ALPHAS, (False, True))))
def test_kd_grid_finite_difference(tau, alpha, scale):
    rng = np.random.default_rng(int(tau * 100 + alpha * 10))
    cfg = DistillConfig("normal_kd", tau, alpha, kd_grad_scale=scale)
    z, y = _batch(rng)
    t = rng.standard_normal(z.shape) * 3
    num = finite_diff_grad(lambda s: kd_loss(s, t, y, cfg).loss, z)
    assert grad_close(kd_loss(z, t, y, cfg).grad_student_logits, num, 1e-5, 1e-7)


def test_kd_teacher_shape_mismatch():
    with pytest.raises(ValueError):
        kd_loss(np.zeros((2, 3)), np.zeros((2, 4)), [0, 1], DistillConfig("normal_kd"))


# -- rectification ------------------------------------------------------------

def test_rectify_swaps_wrong_row():
    out, frac = rectify([[1.0, 3.0, 2.0]], [0])
    assert out.tolist() == [[3.0, 1.0, 2.0]]
    assert frac == 1.0


def test_rectify_keeps_correct_row():
    t = np.array([[3.0, 1.0, 2.0]])
    out, frac = rectify(t, [0])
    assert out.tolist() == [[3.0, 1.0, 2.0]]
    assert frac == 0.0


def test_rectify_counts_fraction():
    t = np.array([[5.0, 0, 0], [0, 5.0, 0], [0, 0, 5.0], [5.0, 0, 0]])
    out, frac = rectify(t, [0, 1, 2, 2])
    assert frac == 0.25
    assert out[3].tolist() == [0, 0, 5.0]


def test_rectify_does_not_mutate():
    t = np.array([[1.0, 3.0, 2.0]])
    rectify(t, [0])
    assert t.tolist() == [[1.0, 3.0, 2.0]]


def test_rectify_tie_uses_lowest_index():
    # argmax is index 1 (tie with 2 goes low); label 2 swaps with index 1, no change in values.
    out, frac = rectify([[0.0, 4.0, 4.0]], [2])
    assert frac == 1.0
    assert out.tolist() == [[0.0, 4.0, 4.0]]
    assert argmax_row(out).tolist() == [1]


def test_rectify_shape_mismatch():
    with pytest.raises(ValueError):
        rectify(np.zeros((3, 4)), [0, 1])


distinct_rows = st.integers(2, 8).flatmap(lambda k: st.tuples(
    arrays(np.float64, (6, k), elements=st.floats(-20, 20), unique=True),
    arrays(np.int64, 6, elements=st.integers(0, k - 1))))


@given(distinct_rows)
def test_rectify_properties(data):
    t, y = data
    out, frac = rectify(t, y)
    assert argmax_row(out).tolist() == y.tolist()
    for row_in, row_out in zip(t, out):
        assert sorted(row_in.tolist()) == sorted(row_out.tolist())
        assert np.count_nonzero(row_in != row_out) in (0, 2)
    again, frac2 = rectify(out, y)
    assert again.tobytes() == out.tobytes() and frac2 == 0.0
    assert frac == np.count_nonzero(argmax_row(t) != y) / len(y)


# -- DR-KD --------------------------------------------------------------------

def test_drkd_equals_kd_on_correct_teacher():
    rng = np.random.default_rng(6)
    t, _ = _batch(rng)
    y = argmax_row(t)
    z = rng.standard_normal(t.shape)
    cfg = DistillConfig("drkd", 20.0, 0.95)
    dr, kd = drkd_loss(z, t, y, cfg), kd_loss(z, t, y, cfg)
    assert dr.loss == kd.loss
    assert dr.grad_student_logits.tobytes() == kd.grad_student_logits.tobytes()
    assert dr.rectified_fraction == 0.0


def test_drkd_alpha_zero_is_ce():
    rng = np.random.default_rng(7)
    t, y = _wrong_half(rng)
    z = rng.standard_normal(t.shape)
    res = drkd_loss(z, t, y, DistillConfig("drkd", 20.0, 0.0))
    ce = cross_entropy(z, y)
    assert res.loss == ce.loss
    assert res.grad_student_logits.tobytes() == ce.grad_student_logits.tobytes()


def test_drkd_uses_rectified_teacher():
    rng = np.random.default_rng(8)
    t, y = _wrong_half(rng)
    z = rng.standard_normal(t.shape)
    cfg = DistillConfig("drkd", 6.0, 0.4)
    fixed, _ = rectify(t, y)
    res = drkd_loss(z, t, y, cfg)
    assert res.loss == kd_loss(z, fixed, y, cfg).loss
    assert res.rectified_fraction == 0.5


@pytest.mark.parametrize("tau,alpha", list(itertools.product(TAUS, ALPHAS)))
def test_drkd_finite_difference(tau, alpha):
    rng = np.random.default_rng(int(tau * 7 + alpha * 100))
    cfg = DistillConfig("drkd", tau, alpha)
    t, y = _wrong_half(rng)
    z = rng.standard_normal(t.shape) * 2
    num = finite_diff_grad(lambda s: drkd_loss(s, t, y, cfg).loss, z)
    assert grad_close(drkd_loss(z, t, y, cfg).grad_student_logits, num, 1e-5, 1e-7)


# -- label smoothing ----------------------------------------------------------

def test_lsr_zero_eps_is_ce_bitwise():
    rng = np.random.default_rng(9)
    z, y = _batch(rng)
    res, ce = lsr_loss(z, y, DistillConfig("lsr", lsr_epsilon=0.0)), cross_entropy(z, y)
    assert res.loss == ce.loss
    assert res.grad_student_logits.tobytes() == ce.grad_student_logits.tobytes()


def test_lsr_uniform_prediction():
    assert lsr_loss([[0.0, 0.0]], [0], DistillConfig("lsr", lsr_epsilon=0.1)).loss == \
        pytest.approx(math.log(2), abs=1e-15)


def test_lsr_target_definition():
    z = np.array([[1.0, 2.0, 3.0]])
    eps = 0.1
    target = np.array([1 - eps + eps / 3, eps / 3, eps / 3])
    expected = -float(np.sum(target * np.log(softmax_tau(z))))
    assert lsr_loss(z, [0], DistillConfig("lsr", lsr_epsilon=eps)).loss == pytest.approx(expected, rel=1e-13)


def test_lsr_finite_difference():
    rng = np.random.default_rng(10)
    cfg = DistillConfig("lsr", lsr_epsilon=0.1)
    for _ in range(10):
        z, y = _batch(rng)
        num = finite_diff_grad(lambda s: lsr_loss(s, y, cfg).loss, z)
        assert grad_close(lsr_loss(z, y, cfg).grad_student_logits, num, 1e-6, 1e-9)


# -- config and dispatch ------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    {"framework": "fitnet"}, {"tau": 0.0}, {"alpha": 1.5}, {"alpha": -0.1}, {"lsr_epsilon": 1.0},
])
def test_distill_config_validation(kwargs):
    with pytest.raises(ValueError):
        DistillConfig(**kwargs)


def test_tfkd_self_is_plain_kd():
    rng = np.random.default_rng(11)
    z, y = _batch(rng)
    t = rng.standard_normal(z.shape)
    a = compute_loss(z, y, DistillConfig("tfkd_self", 20.0, 0.95), t)
    b = kd_loss(z, t, y, DistillConfig("normal_kd", 20.0, 0.95))
    assert a.loss == b.loss


def test_dispatch_requires_teacher():
    with pytest.raises(ValueError):
        compute_loss(np.zeros((1, 2)), [0], DistillConfig("drkd"))
