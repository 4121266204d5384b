import numpy as np
import pytest

from oracles import apg_scalar_reference, nag_scalar_recurrence
from sparsearch.optim import (ApgNag, DivergenceError, Nag, apg_nag_update,
                              lasso_reference, nag_update, schedule_lr, soft_threshold)
from sparsearch.tensor import Tensor


def test_soft_threshold_definition():
    assert soft_threshold(np.array([0.25]), 0.1)[0] == pytest.approx(0.15)
    assert soft_threshold(np.array([-0.25]), 0.1)[0] == pytest.approx(-0.15)


def test_soft_threshold_exact_zero_inside():
    out = soft_threshold(np.array([0.05, -0.09]), 0.1)
    assert out[0] == 0.0 and out[1] == 0.0


def test_soft_threshold_zero_alpha_identity():
    z = np.array([1.5, -0.3, 0.0])
    assert np.array_equal(soft_threshold(z, 0.0), z)


def test_soft_threshold_rejects_negative_alpha():
    with pytest.raises(ValueError):
        soft_threshold(np.array([1.0]), -0.1)


def test_soft_threshold_shrinks_and_keeps_sign():
    rng = np.random.default_rng(0)
    for _ in range(50):
        z = rng.normal(size=20) * 3
        alpha = rng.uniform(0, 2)
        out = soft_threshold(z, alpha)
        assert np.all(np.abs(out) <= np.abs(z) + 1e-15)
        assert np.all((out == 0) | (np.sign(out) == np.sign(z)))


def test_lasso_reference():
    assert lasso_reference(1.0, 0.3) == pytest.approx(0.7)
    assert lasso_reference(0.2, 0.5) == 0.0
    assert lasso_reference(-2.0, 0.5) == pytest.approx(-1.5)


def test_apg_hand_step_no_momentum():
    lam = np.array([0.5])
    v = np.zeros(1)
    apg_nag_update(lam, np.array([1.0]), v, 0.1, 0.1, 0.0)
    # z=0.4, S_.01(0.4)=0.39, v=-0.11, lam=0.39
    assert lam[0] == pytest.approx(0.39, abs=1e-15)
    assert v[0] == pytest.approx(-0.11, abs=1e-15)


def test_apg_hand_step_with_momentum():
    lam = np.array([0.5])
    v = np.zeros(1)
    apg_nag_update(lam, np.array([1.0]), v, 0.1, 0.1, 0.9)
    assert abs(lam[0] - 0.291) < 1e-15


def test_apg_scalar_lasso_converges_to_soft_threshold():
    got = apg_scalar_reference(0.0, 1.0, 0.1, 0.3, 0.9, 2000)
    assert abs(got - 0.7) < 1e-6
    lam = np.zeros(1)
    v = np.zeros(1)
    for _ in range(2000):
        apg_nag_update(lam, lam - 1.0, v, 0.1, 0.3, 0.9)
    assert abs(lam[0] - 0.7) < 1e-6


def test_apg_matches_scalar_reference_trajectorywise():
    lam = np.array([0.8])
    v = np.zeros(1)
    for steps in (1, 5, 20):
        lam[:] = 0.8
        v[:] = 0.0
        for _ in range(steps):
            apg_nag_update(lam, lam - (-0.4), v, 0.05, 0.2, 0.9)
        want = apg_scalar_reference(0.8, -0.4, 0.05, 0.2, 0.9, steps)
        assert abs(lam[0] - want) < 1e-14


def test_apg_separable_lasso_dim64():
    rng = np.random.default_rng(1)
    for trial in range(5):
        dim = int(rng.integers(2, 65))
        a = rng.uniform(-2, 2, dim)
        gamma = rng.uniform(0.05, 0.6)
        lam = np.zeros(dim)
        v = np.zeros(dim)
        for _ in range(2000):
            apg_nag_update(lam, lam - a, v, 0.1, gamma, 0.9)
        assert np.max(np.abs(lam - lasso_reference(a, gamma))) < 1e-6


def test_apg_gamma_zero_mu_zero_is_plain_gd():
    rng = np.random.default_rng(2)
    lam = rng.normal(size=8)
    v = np.zeros(8)
    grad = rng.normal(size=8)
    want = lam - 0.1 * grad
    apg_nag_update(lam, grad, v, 0.1, 0.0, 0.0)
    assert np.array_equal(lam, want)


def test_apg_zeros_absorbing():
    lam = np.zeros(4)
    v = np.zeros(4)
    for _ in range(10):
        apg_nag_update(lam, np.zeros(4), v, 0.1, 0.2, 0.9)
    assert np.all(lam == 0.0) and np.all(v == 0.0)


def test_apg_threshold_scaling_identity():
    # scaling gamma and grad by c with lr -> lr/c leaves the trajectory invariant
    rng = np.random.default_rng(3)
    grads = rng.normal(size=(10, 6))
    c = 3.7
    lam1 = rng.normal(size=6)
    lam2 = lam1.copy()
    v1 = np.zeros(6)
    v2 = np.zeros(6)
    for g in grads:
        apg_nag_update(lam1, g, v1, 0.1, 0.25, 0.9)
        apg_nag_update(lam2, c * g, v2, 0.1 / c, c * 0.25, 0.9)
    assert np.max(np.abs(lam1 - lam2)) < 1e-12


def test_nag_plain_gd_when_no_momentum():
    w = np.array([1.0, -2.0])
    v = np.zeros(2)
    g = np.array([0.5, 0.5])
    nag_update(w, g, v, 0.1, 0.0)
    assert np.allclose(w, [0.95, -2.05])


def test_nag_fixed_point_zero_grad():
    w = np.array([3.0])
    v = np.zeros(1)
    nag_update(w, np.zeros(1), v, 0.1, 0.9)
    assert w[0] == 3.0


def test_nag_quadratic_bowl_converges():
    trace = nag_scalar_recurrence(5.0, lambda w: w, 0.1, 0.9, 500)
    assert abs(trace[-1]) < 1e-8
    # vector path matches the scalar recurrence exactly
    w = np.array([5.0])
    v = np.zeros(1)
    for k in range(500):
        nag_update(w, w.copy(), v, 0.1, 0.9)
        assert abs(w[0] - trace[k]) < 1e-14


def test_nag_class_weight_decay_only_on_weights():
    w = Tensor(np.array([1.0]), requires_grad=True)
    b = Tensor(np.array([1.0]), requires_grad=True)
    w.grad = np.zeros(1)
    b.grad = np.zeros(1)
    opt = Nag(0.1, 0.0, weight_decay=0.05)
    opt.step([("w", w, "weight"), ("b", b, "bias")])
    assert w.data[0] == pytest.approx(1.0 - 0.1 * 2 * 0.05 * 1.0)
    assert b.data[0] == 1.0


def test_nag_skips_gradless_and_rejects_nonfinite():
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = Nag(0.1)
    opt.step([("w", w, "weight")])  # grad None: no-op
    assert w.data[0] == 1.0
    w.grad = np.array([np.nan])
    with pytest.raises(DivergenceError):
        opt.step([("w", w, "weight")])


def test_apg_class_rejects_nonfinite():
    lam = Tensor(np.array([1.0]), requires_grad=True)
    lam.grad = np.array([np.inf])
    opt = ApgNag(0.1)
    with pytest.raises(DivergenceError):
        opt.step("lam", lam, 0.1)


def test_apg_class_clear_pruned_zeroes_state():
    lam = Tensor(np.array([0.5, -0.5, 0.8]), requires_grad=True)
    lam.grad = np.array([0.1, 0.2, -0.1])
    opt = ApgNag(0.1)
    opt.step("t", lam, 0.01)
    mask = np.array([True, False, True])
    opt.clear_pruned("t", lam, mask)
    assert lam.data[1] == 0.0
    assert opt.velocity["t"][1] == 0.0
    # absorbed: further steps with zero grad keep it at zero
    lam.grad = np.zeros(3)
    for _ in range(5):
        opt.step("t", lam, 0.01)
    assert lam.data[1] == 0.0


def test_lr_schedules():
    assert schedule_lr("constant", 0.1, 7, 10) == 0.1
    assert schedule_lr("linear-decay", 0.1, 0, 10) == pytest.approx(0.1)
    assert schedule_lr("linear-decay", 0.1, 5, 10) == pytest.approx(0.05)
    with pytest.raises(ValueError):
        schedule_lr("cosine", 0.1, 0, 10)
