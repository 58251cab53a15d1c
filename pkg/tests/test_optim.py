"""Optimizer update rules against their closed forms."""

import numpy as np
import pytest

from gradleak import tensor as T
from gradleak.optim import Adam, MissingGradError, SGDMomentum, make_optimizer
from gradleak.tensor import Graph, Tensor


def test_adam_first_step_is_normalized_gradient():
    rng = np.random.default_rng(0)
    g = rng.normal(size=(5,)).astype(np.float32)
    p = Tensor(np.zeros(5, dtype=np.float32), requires_grad=True)
    p.grad = g.copy()
    opt = Adam({"p": p}, lr=0.1)
    opt.step()
    # bias correction makes m_hat / sqrt(v_hat) = g / |g| at step 1
    np.testing.assert_allclose(p.data, -0.1 * g / (np.abs(g) + 1e-8), rtol=1e-5)
    assert opt.step_count == 1
    assert p.grad is None  # zeroed after the step


def test_sgd_zero_momentum_is_plain_descent():
    g = np.array([1.0, -2.0], dtype=np.float32)
    p = Tensor(np.array([5.0, 5.0], dtype=np.float32), requires_grad=True)
    p.grad = g.copy()
    SGDMomentum({"p": p}, lr=0.5, momentum=0.0).step()
    np.testing.assert_allclose(p.data, [5.0, 5.0] - 0.5 * g, rtol=1e-6)


def test_sgd_momentum_accumulates_velocity():
    p = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
    opt = SGDMomentum({"p": p}, lr=1.0, momentum=0.5)
    for _ in range(2):
        p.grad = np.ones(1, dtype=np.float32)
        opt.step()
    # steps: -1, then -(0.5 + 1)
    np.testing.assert_allclose(p.data, [-2.5], rtol=1e-6)


def test_adam_descends_convex_quadratic():
    rng = np.random.default_rng(1)
    target = rng.normal(size=(8,))
    p = Tensor(rng.normal(size=(8,)), requires_grad=True, dtype=np.float64)
    opt = Adam({"p": p}, lr=0.05)

    def loss_value():
        return float(((p.data - target) ** 2).sum())

    start = loss_value()
    for _ in range(100):
        with Graph() as g:
            diff = T.sub(p, Tensor(target, dtype=np.float64))
            g.backward(T.sum(T.mul(diff, diff)))
        opt.step()
    assert loss_value() < start
    assert opt.step_count == 100


def test_missing_grad_errors_and_names_parameter():
    p = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(MissingGradError, match="'p'"):
        Adam({"p": p}).step()


def test_make_optimizer_dispatch():
    p = {"p": Tensor(np.zeros(2), requires_grad=True)}
    assert make_optimizer(p, {"kind": "adam", "lr": 0.01}).kind == "adam"
    assert make_optimizer(p, {"kind": "sgd-momentum"}).kind == "sgd-momentum"
    with pytest.raises(ValueError, match="unknown optimizer"):
        make_optimizer(p, {"kind": "rmsprop"})
