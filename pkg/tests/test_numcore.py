import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pmnet.numcore import (
    NumericError,
    ParamTape,
    ShapeError,
    finite_diff_grad,
    glorot_uniform,
    log_softmax,
    matmul,
    relative_error,
    sigmoid,
    softmax,
    softmax_row,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_matmul_identity_cases():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(a, np.eye(2)), a)
    assert np.array_equal(matmul(np.eye(2), [[5.0], [7.0]]), [[5.0], [7.0]])


def test_matmul_hand_value():
    assert matmul([[1.0, 2.0]], [[3.0], [4.0]]).tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matmul_associative(seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5, 2))
    left = matmul(matmul(a, b), c)
    right = matmul(a, matmul(b, c))
    assert np.all(relative_error(left, right) <= 1e-9)


def test_softmax_row_examples():
    np.testing.assert_allclose(softmax_row([0.0, 0.0, 0.0]), [1 / 3] * 3, rtol=0, atol=1e-15)
    for c in (-7.0, 0.0, 3.5, 800.0):
        out = softmax_row([c, c + math.log(2)])
        e = [math.exp(0.0), math.exp(math.log(2))]
        np.testing.assert_allclose(out, [e[0] / sum(e), e[1] / sum(e)], rtol=0, atol=1e-12)
        np.testing.assert_allclose(out, [1 / 3, 2 / 3], rtol=0, atol=1e-12)
    out = softmax_row([1000.0, 0.0])
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_row_empty():
    with pytest.raises(ValueError):
        softmax_row([])


@given(arrays(np.float64, st.integers(1, 12), elements=finite), finite)
def test_softmax_sums_to_one_and_shift_invariant(v, c):
    p = softmax_row(v)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p >= 0)
    assert np.max(np.abs(softmax_row(v + c) - p)) <= 1e-12


@given(arrays(np.float64, (3, 5), elements=finite))
def test_log_softmax_matches_log_of_softmax(x):
    np.testing.assert_allclose(log_softmax(x), np.log(softmax(x)), atol=1e-12)


def test_sigmoid_examples():
    assert sigmoid(np.array([0.0]))[0] == 0.5
    assert sigmoid(np.array([math.log(3)]))[0] == pytest.approx(0.75, abs=1e-15)
    big = sigmoid(np.array([-800.0, 800.0]))
    assert np.all(np.isfinite(big)) and big[1] == 1.0


@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(-700, 700)))
def test_sigmoid_symmetry(x):
    np.testing.assert_allclose(sigmoid(x) + sigmoid(-x), 1.0, atol=1e-15)


def test_glorot_bounds():
    w = glorot_uniform(np.random.default_rng(0), 30, 20)
    assert w.shape == (30, 20)
    assert np.abs(w).max() <= math.sqrt(6 / 50)


def _tape(**arrays):
    t = ParamTape()
    for k, v in arrays.items():
        t.add(k, v)
    return t


def test_finite_diff_quadratic():
    theta = np.array([3.0])
    g = finite_diff_grad(lambda: float(theta[0] ** 2), _tape(theta=theta), 1e-5)
    assert abs(g["theta"][0] - 6.0) < 1e-6
    assert theta[0] == 3.0  # restored


def test_finite_diff_constant():
    w = np.ones((2, 3))
    g = finite_diff_grad(lambda: 4.0, _tape(w=w), 1e-5)
    assert np.array_equal(g["w"], np.zeros((2, 3)))


@pytest.mark.parametrize("seed", range(5))
def test_finite_diff_sigmoid_bce(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=1)
    x, y = rng.normal(size=8), (rng.random(8) < 0.5).astype(float)

    def loss():
        p = sigmoid(w[0] * x)
        return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))

    analytic = np.mean((sigmoid(w[0] * x) - y) * x)
    numeric = finite_diff_grad(loss, _tape(w=w), 1e-5)["w"][0]
    assert relative_error(np.array([analytic]), np.array([numeric]))[0] < 1e-6


def test_finite_diff_non_finite_loss():
    w = np.zeros(1)
    with pytest.raises(NumericError):
        finite_diff_grad(lambda: float("nan"), _tape(w=w))


def test_tape_rejects_duplicates_and_bad_grads():
    t = _tape(a=np.zeros(2))
    with pytest.raises(ValueError):
        t.add("a", np.zeros(2))
    with pytest.raises((ShapeError, ValueError)):
        t.set_grads({"a": np.zeros(3)})
    with pytest.raises(KeyError):
        t["missing"]
