#!/usr/bin/env python3
"""
Tests for the tensor helpers: reference matmul, Adam and the gradient checker.
"""

import numpy as np
import pytest

from src.errors import NonFiniteError, ShapeError
from src.tensor_ops import Adam, AdamState, adam_step, clip_grad_norm, grad_check, matmul


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def test_matmul_small_example():
    out = matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[5.0], [6.0]]))
    assert out.tolist() == [[17.0], [39.0]]


def test_matmul_matches_triple_loop_bitwise():
    rng = np.random.default_rng(0)
    for shape in [(3, 5, 4), (1, 7, 1), (6, 2, 9)]:
        a = rng.normal(size=shape[:2])
        b = rng.normal(size=shape[1:])
        assert np.array_equal(matmul(a, b), triple_loop(a, b))


def test_matmul_rejects_mismatch():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_adam_first_step_moves_by_lr():
    param = np.array([1.0])
    state = AdamState.for_param(param)
    adam_step(param, np.array([0.5]), state)
    assert param[0] == pytest.approx(1.0 - 0.001, abs=1e-9)
    assert state.t == 1


def test_adam_zero_gradient_keeps_param():
    param = np.array([2.0, -1.0])
    state = AdamState.for_param(param)
    adam_step(param, np.zeros(2), state)
    assert param.tolist() == [2.0, -1.0]


def test_adam_matches_scalar_oracle():
    rng = np.random.default_rng(4)
    grads = rng.normal(size=20)
    param = np.array([0.3])
    state = AdamState.for_param(param, lr=0.01)
    p, m, v = 0.3, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        adam_step(param, np.array([g]), state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        p -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert param[0] == pytest.approx(p, rel=1e-12)


def test_adam_rejects_nan_and_shape_mismatch():
    param = np.zeros(3)
    with pytest.raises(NonFiniteError):
        adam_step(param, np.array([0.0, np.nan, 0.0]), AdamState.for_param(param))
    with pytest.raises(ShapeError):
        adam_step(param, np.zeros(2), AdamState.for_param(param))


def test_adam_optimizer_updates_every_tensor():
    params = {"a": np.ones(2), "b": np.ones((2, 2))}
    Adam(lr=0.1).step(params, {"a": np.ones(2), "b": -np.ones((2, 2))})
    assert np.allclose(params["a"], 0.9)
    assert np.allclose(params["b"], 1.1)


def test_clip_grad_norm_scales_jointly():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    norm = clip_grad_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    assert grads["a"][0] == pytest.approx(0.6)
    assert grads["b"][0] == pytest.approx(0.8)


def test_grad_check_on_sum_of_squares():
    x = np.array([1.0, -2.0, 0.5])
    assert grad_check(lambda v: float(np.sum(v * v)), x, 2 * x) < 1e-6


def test_grad_check_detects_wrong_gradient():
    x = np.array([1.0, 2.0])
    assert grad_check(lambda v: float(np.sum(v * v)), x, x) > 0.1


def test_grad_check_rejects_non_finite_function():
    with pytest.raises(NonFiniteError):
        grad_check(lambda v: float("nan"), np.array([1.0]), np.array([0.0]))


def test_matmul_associativity_and_distributivity():
    rng = np.random.default_rng(9)
    a, b, c = (rng.normal(size=(8, 8)) for _ in range(3))
    assert np.allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), rtol=1e-12, atol=1e-12)
    assert np.allclose(matmul(a, b + c), matmul(a, b) + matmul(a, c), rtol=1e-12, atol=1e-12)
    assert np.allclose(matmul(a + b, c), matmul(a, c) + matmul(b, c), rtol=1e-12, atol=1e-12)
