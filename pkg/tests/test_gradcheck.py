"""Finite-difference checker behavior on known closed-form cases."""

import numpy as np
import pytest

from graphskip.errors import NumericError, ShapeError
from graphskip.gradcheck import grad_check
from graphskip.tensor import Tensor, log, sigmoid


def test_square_at_three():
    theta = Tensor(np.array([3.0]), requires_grad=True)
    report = grad_check(lambda: (theta * theta).sum(), [theta], eps=1e-6)
    assert theta.grad[0] == pytest.approx(6.0, abs=1e-12)
    assert report["max_rel_err"] < 1e-6


def test_sigmoid_gradient_quarter_at_zero():
    theta = Tensor(np.zeros(5), requires_grad=True, dtype="float64")
    grad_check(lambda: sigmoid(theta).sum(), [theta], eps=1e-6)
    np.testing.assert_array_equal(theta.grad, np.full(5, 0.25))


def test_directional_mode_two_params():
    rng = np.random.default_rng(0)
    w = Tensor(rng.standard_normal((3, 2)), requires_grad=True, dtype="float64")
    b = Tensor(rng.standard_normal(2), requires_grad=True, dtype="float64")
    x = Tensor(rng.standard_normal((5, 3)), dtype="float64")
    y = Tensor(rng.standard_normal((5, 2)), dtype="float64")

    def f():
        r = x @ w + b - y
        return (r * r).mean()

    report = grad_check(f, [w, b], eps=1e-6, mode="directional")
    assert report["max_rel_err"] < 1e-8
    assert set(report["per_param"]) == {"param0", "param1"}


def test_elementwise_subset_limits_probes():
    theta = Tensor(np.array([1.0, 2.0, 3.0, 4.0]), requires_grad=True,
                   dtype="float64")
    report = grad_check(lambda: (theta * theta).sum(), [theta], eps=1e-6,
                        max_elems=2)
    assert report["max_rel_err"] < 1e-6


def test_scalar_loss_required():
    theta = Tensor(np.ones(3), requires_grad=True, dtype="float64")
    with pytest.raises(ShapeError):
        grad_check(lambda: theta * 2.0, [theta])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_probe_raises():
    theta = Tensor(np.array([0.5]), requires_grad=True, dtype="float64")
    with pytest.raises(NumericError):
        grad_check(lambda: log(theta).sum(), [theta], eps=1.0)


def test_unknown_mode_rejected():
    theta = Tensor(np.ones(2), requires_grad=True, dtype="float64")
    with pytest.raises(ValueError):
        grad_check(lambda: theta.sum(), [theta], mode="stochastic")
