import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scbignn.numerics import (
    MlpParams,
    NumericsError,
    OptimizerState,
    cross_entropy,
    grad_check,
    mlp_backward,
    mlp_forward,
    sgd_step,
    softmax_rows,
)

finite = st.floats(min_value=-50, max_value=50, allow_nan=False, allow_infinity=False)


def test_softmax_single_element():
    assert softmax_rows(np.array([[3.7]]))[0, 0] == 1.0


def test_softmax_symmetric_row():
    np.testing.assert_allclose(softmax_rows(np.zeros((1, 2))), [[0.5, 0.5]])


def test_softmax_log_values():
    # exp(x) / sum exp(x), evaluated at 40 digits with mpmath
    out = softmax_rows(np.array([[math.log(1), math.log(3)]]))
    np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-15)


def test_softmax_rejects_nonfinite():
    with pytest.raises(NumericsError):
        softmax_rows(np.array([[0.0, np.nan]]))


def test_softmax_mask_zeroes_excluded_columns():
    out = softmax_rows(np.array([[1.0, 100.0, 2.0]]), np.array([[True, False, True]]))
    assert out[0, 1] == 0.0
    assert out.sum() == pytest.approx(1.0)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite))
def test_softmax_rows_sum_to_one(m):
    out = softmax_rows(m)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(out >= 0) and np.all(out <= 1)


def test_mlp_zero_weights_give_zero():
    p = MlpParams([np.zeros((3, 4)), np.zeros((4, 2))], [np.zeros(4), np.zeros(2)])
    np.testing.assert_array_equal(mlp_forward(p, np.ones((5, 3))), np.zeros((5, 2)))


def test_mlp_identity_layer():
    p = MlpParams([np.eye(3)], [np.zeros(3)])
    x = np.array([[1.0, -2.0, 3.0]])
    np.testing.assert_array_equal(mlp_forward(p, x), x)


def test_mlp_matches_reference_forward():
    rng = np.random.default_rng(3)
    p = MlpParams.init(rng, [3, 4, 2], np.float64)
    p.biases[0][:] = rng.normal(size=4)
    p.biases[1][:] = rng.normal(size=2)
    x = rng.normal(size=(2, 3))
    # scalar loops, no numpy linear algebra
    ref = []
    for row in x:
        hidden = [max(0.0, sum(row[i] * p.weights[0][i, j] for i in range(3)) + p.biases[0][j]) for j in range(4)]
        ref.append([sum(hidden[i] * p.weights[1][i, j] for i in range(4)) + p.biases[1][j] for j in range(2)])
    np.testing.assert_allclose(mlp_forward(p, x), ref, atol=1e-12)


def test_mlp_dimension_mismatch():
    p = MlpParams.init(np.random.default_rng(0), [3, 2])
    with pytest.raises(NumericsError):
        mlp_forward(p, np.ones((1, 4)))
    with pytest.raises(NumericsError):
        MlpParams([np.ones((3, 4)), np.ones((5, 2))], [np.ones(4), np.ones(2)])


def test_cross_entropy_matched_one_hot():
    assert cross_entropy(np.array([[20.0, 0.0, 0.0]]), np.array([[1.0, 0.0, 0.0]])) < 1e-3


@pytest.mark.parametrize("c", [2, 3, 7])
def test_cross_entropy_uniform_logits(c):
    rng = np.random.default_rng(c)
    t = rng.dirichlet(np.ones(c), size=4)
    assert cross_entropy(np.zeros((4, c)), t) == pytest.approx(math.log(c), abs=1e-12)


def test_cross_entropy_reference_value():
    # -(0.3 log s1 + 0.7 log s2) for softmax([1, 2]), 40-digit mpmath value
    assert cross_entropy(np.array([[1.0, 2.0]]), np.array([[0.3, 0.7]])) == pytest.approx(
        0.6132616875182228, abs=1e-14)


def test_cross_entropy_rejects_bad_target():
    with pytest.raises(NumericsError):
        cross_entropy(np.zeros((1, 2)), np.array([[0.5, 0.6]]))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 5)), elements=st.floats(-10, 10)))
def test_cross_entropy_of_own_softmax_is_entropy(logits):
    p = softmax_rows(logits)
    entropy = -(p * np.log(np.maximum(p, 1e-300))).sum(axis=1).mean()
    assert cross_entropy(logits, p) == pytest.approx(entropy, abs=1e-6)


def test_sgd_zero_gradient_is_fixed_point():
    for mode in ("sgd", "adam"):
        p = {"w": np.array([1.0, -2.0])}
        sgd_step(OptimizerState(lr=0.1, mode=mode), p, {"w": np.zeros(2)})
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_plain_sgd_arithmetic():
    p = {"w": np.array([1.0])}
    opt = OptimizerState(lr=0.1, mode="sgd")
    sgd_step(opt, p, {"w": np.array([0.5])})
    assert p["w"][0] == pytest.approx(0.95, abs=1e-15)
    assert opt.step == 1


def test_adam_two_steps_match_independent_rule():
    def reference(p, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        m = v = 0.0
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            p = p - lr * mhat / (math.sqrt(vhat) + eps)
        return p

    p = {"w": np.array([0.7])}
    opt = OptimizerState(lr=1e-3)
    for g in (0.3, -1.2):
        sgd_step(opt, p, {"w": np.array([g])})
    assert p["w"][0] == pytest.approx(reference(0.7, [0.3, -1.2]), abs=1e-15)
    assert opt.step == 2


def test_nonfinite_gradient_skips_step(caplog):
    p = {"w": np.array([1.0])}
    opt = OptimizerState(lr=0.1)
    assert sgd_step(opt, p, {"w": np.array([np.inf])}) is False
    assert p["w"][0] == 1.0
    assert opt.step == 0
    assert "non-finite" in caplog.text


def test_grad_check_quadratic():
    params = {"w": np.array([3.0])}

    def f():
        w = params["w"][0]
        return w * w, {"w": np.array([2 * w])}

    _, g = f()
    assert g["w"][0] == 6.0
    assert grad_check(f, params, 1e-6) < 1e-8


def test_grad_check_requires_float64_and_eps_range():
    params = {"w": np.array([3.0], dtype=np.float32)}
    with pytest.raises(NumericsError):
        grad_check(lambda: (0.0, {}), params, 1e-6)
    with pytest.raises(NumericsError):
        grad_check(lambda: (0.0, {}), {"w": np.array([1.0])}, 1e-2)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_mlp_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = MlpParams.init(rng, [3, 5, 2], np.float64)
    x = rng.normal(size=(4, 3))
    target = rng.dirichlet(np.ones(2), size=4)
    params = dict(p.named("mlp"))

    def f():
        from scbignn.numerics import weighted_cross_entropy

        out, cache = mlp_forward(p, x, return_cache=True)
        loss, g = weighted_cross_entropy(out, target, np.full(4, 0.25))
        grads = {}
        mlp_backward(p, cache, g, "mlp", grads)
        return loss, grads

    assert grad_check(f, params, 1e-6) < 1e-4


def test_forward_is_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(11)
        p = MlpParams.init(rng, [4, 8, 3], np.float64)
        return mlp_forward(p, rng.normal(size=(6, 4)))

    assert run().tobytes() == run().tobytes()
