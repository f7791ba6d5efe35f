import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from chartroute.numkit import (
    AdamWState,
    DimensionError,
    NumericError,
    adamw_step,
    affine,
    affine_backward,
    cosine_lr,
    gelu,
    gelu_grad,
    grad_check,
    matmul,
    mse_loss,
    softmax_rows,
    softmax_rows_backward,
)


def test_matmul_identity_zero_and_closed_form():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 4))
    assert np.array_equal(matmul(A, np.eye(4)), A)
    assert np.array_equal(matmul(A, np.zeros((4, 2))), np.zeros((3, 2)))
    assert matmul([[1, 2], [3, 4]], [[5], [6]]).tolist() == [[17.0], [39.0]]
    with pytest.raises(DimensionError):
        matmul(A, A)


def test_affine_identity_and_zero_input():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(3, 4))
    assert np.array_equal(affine(X, np.eye(4), np.zeros(4)), X)
    b = rng.normal(size=5)
    Y = affine(np.zeros((3, 4)), rng.normal(size=(4, 5)), b)
    assert all(np.array_equal(row, b) for row in Y)
    with pytest.raises(DimensionError):
        affine(X, np.eye(3), np.zeros(3))


def _affine_problem(seed):
    rng = np.random.default_rng(seed)
    X, W, b, T = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2), rng.normal(size=(3, 2))
    params = {"X": X, "W": W, "b": b}

    def loss_fn():
        loss, dy = mse_loss(affine(X, W, b), T)
        dX, dW, db = affine_backward(X, W, dy)
        return loss, {"X": dX, "W": dW, "b": db}

    return loss_fn, params


def test_affine_backward_matches_central_differences():
    loss_fn, params = _affine_problem(3)
    rep = grad_check(loss_fn, params)
    assert rep.passed and rep.max_rel_err <= 1e-4
    assert rep.checked == 12 + 8 + 2


def test_gelu_values():
    assert gelu(np.array([0.0]))[0] == 0.0
    assert abs(gelu(np.array([10.0]))[0] - 10.0) <= 1e-6
    # independent evaluation of the tanh approximation at x = 1
    c = math.sqrt(2 / math.pi)
    expected = 0.5 * (1 + math.tanh(c * (1 + 0.044715)))
    assert gelu(np.array([1.0]))[0] == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(0.8411919906082768, abs=1e-15)


def test_gelu_grad_central_difference():
    x = np.linspace(-4, 4, 41)
    h = 1e-6
    num = (gelu(x + h) - gelu(x - h)) / (2 * h)
    assert np.max(np.abs(num - gelu_grad(x))) < 1e-8


def test_softmax_closed_forms():
    assert np.allclose(softmax_rows(np.full((1, 5), 3.7)), 0.2, atol=1e-15)
    np.testing.assert_allclose(softmax_rows(np.array([[0.0, math.log(3)]])), [[0.25, 0.75]], atol=1e-15)
    x = np.random.default_rng(2).normal(size=(4, 6))
    np.testing.assert_allclose(softmax_rows(x + 123.0), softmax_rows(x), atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    p = softmax_rows(x)
    assert np.all(p >= 0)
    assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-9)


def test_softmax_backward_grad_check():
    rng = np.random.default_rng(4)
    Z, T = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))

    def loss_fn():
        p = softmax_rows(Z)
        loss, dp = mse_loss(p, T)
        return loss, {"Z": softmax_rows_backward(p, dp)}

    assert grad_check(loss_fn, {"Z": Z}).max_rel_err <= 1e-4


def test_mse_loss():
    a = np.arange(6.0).reshape(2, 3)
    assert mse_loss(a, a)[0] == 0.0
    assert mse_loss(a + 1, a)[0] == 1.0
    rng = np.random.default_rng(5)
    p, t = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    brute = sum((p[i, j] - t[i, j]) ** 2 for i in range(2) for j in range(3)) / 6
    loss, g = mse_loss(p, t)
    assert loss == pytest.approx(brute, rel=1e-14)
    np.testing.assert_allclose(g, 2 * (p - t) / 6)
    with pytest.raises(DimensionError):
        mse_loss(p, t.T)


def test_grad_check_quadratic_and_frozen():
    p = np.array([3.0])
    frozen = np.array([7.0])
    rep = grad_check(lambda: (0.5 * p[0] ** 2, {"p": p.copy()}), {"p": p, "frozen": frozen})
    assert rep.passed and rep.max_abs_err < 1e-8
    assert p[0] == 3.0 and frozen[0] == 7.0  # restored


def test_grad_check_detects_wrong_gradient_and_nonfinite():
    p = np.array([2.0])
    rep = grad_check(lambda: (p[0] ** 2, {"p": p * 3}), {"p": p})
    assert not rep.passed and rep.worst_param == "p[0]"
    with pytest.raises(NumericError):
        grad_check(lambda: (float("nan"), {}), {"p": p})


@pytest.mark.parametrize("seed", range(20))
def test_random_affine_gelu_chains_pass_grad_check(seed):
    rng = np.random.default_rng(100 + seed)
    n, a, b = (int(v) for v in rng.integers(1, 7, size=3))
    X, W, bias, T = rng.normal(size=(n, a)), rng.normal(size=(a, b)), rng.normal(size=b), rng.normal(size=(n, b))

    def loss_fn():
        pre = affine(X, W, bias)
        loss, dy = mse_loss(gelu(pre), T)
        dX, dW, db = affine_backward(X, W, dy * gelu_grad(pre))
        return loss, {"X": dX, "W": dW, "b": db}

    rep = grad_check(loss_fn, {"X": X, "W": W, "b": bias}, rel_tol=1e-4, abs_tol=1e-7)
    assert rep.passed


def test_adamw_fixed_points_and_decay():
    p = {"w": np.array([[1.0, -2.0]])}
    g0 = {"w": np.zeros((1, 2))}
    new, st1 = adamw_step(p, g0, AdamWState(), lr=1e-3, weight_decay=0.0)
    assert np.array_equal(new["w"], p["w"]) and st1.step == 1
    new, _ = adamw_step(p, {"w": np.array([[0.3, -0.1]])}, AdamWState(), lr=0.0, weight_decay=0.1)
    assert np.array_equal(new["w"], p["w"])
    lr, wd = 1e-2, 0.1
    new, _ = adamw_step(p, g0, AdamWState(), lr=lr, weight_decay=wd)
    assert np.array_equal(new["w"], p["w"] * (1 - lr * wd))


def test_adamw_first_step_is_sign_times_lr():
    p = {"w": np.array([0.5])}
    new, _ = adamw_step(p, {"w": np.array([0.25])}, AdamWState(), lr=1e-3, weight_decay=0.0)
    assert new["w"][0] == pytest.approx(0.5 - 1e-3, abs=1e-3 * 1e-6)


def test_adamw_three_step_trajectory_matches_hand_derivation():
    lr, wd, b1, b2, eps = 1e-2, 0.1, 0.9, 0.95, 1e-8
    gs = [0.5, -0.2, 0.1]
    # hand-rolled reference, scalar arithmetic only
    x, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate(gs, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh, vh = m / (1 - b1**t), v / (1 - b2**t)
        x = x - lr * wd * x - lr * mh / (math.sqrt(vh) + eps)
    params, state = {"x": np.array([1.0])}, AdamWState()
    for g in gs:
        params, state = adamw_step(params, {"x": np.array([g])}, state, lr, wd)
    assert state.step == 3
    assert params["x"][0] == pytest.approx(x, rel=1e-13)


def test_adamw_clips_global_norm():
    p = {"a": np.zeros(1), "b": np.zeros(1)}
    _, st_big = adamw_step(p, {"a": np.array([30.0]), "b": np.array([40.0])}, AdamWState(), 1e-3, 0.0)
    # norm 50 clipped to 1: first moment = 0.1 * g / 50
    np.testing.assert_allclose(st_big.m["a"], [0.1 * 30 / 50])
    np.testing.assert_allclose(st_big.m["b"], [0.1 * 40 / 50])


def test_cosine_schedule():
    total, peak = 1000, 5e-5
    assert cosine_lr(0, total, peak) == 0.0
    lrs = [cosine_lr(s, total, peak) for s in range(total)]
    assert max(lrs) == pytest.approx(peak)
    assert lrs[-1] <= 1e-7 * peak
    warm = 10
    assert lrs[warm] == pytest.approx(peak)
    assert all(a >= b for a, b in zip(lrs[warm:], lrs[warm + 1 :]))


def test_determinism_bit_identical():
    rng = np.random.default_rng(9)
    X, W, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)
    assert np.array_equal(gelu(affine(X, W, b)), gelu(affine(X.copy(), W.copy(), b.copy())))
