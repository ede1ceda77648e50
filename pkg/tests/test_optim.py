"""Adam update rule."""

import numpy as np
import pytest

from attralign.autodiff import Tensor, sum_axes
from attralign.errors import ShapeError
from attralign.optim import Adam, AdamState, adam_step


def test_zero_gradient_leaves_params_unchanged():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    params = {"p": p}
    state = AdamState(params)
    adam_step(params, {"p": np.zeros(3)}, state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0, 3.0])
    assert state.step == 1


def test_single_step_descends():
    p = Tensor(np.array([1.0]), requires_grad=True)
    params = {"p": p}
    state = AdamState(params, lr=1e-3)
    adam_step(params, {"p": np.array([2.0])}, state)  # grad of x^2 at 1
    assert p.data[0] < 1.0


def test_converges_on_quadratic():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    for _ in range(500):
        (sum_axes((p - 2.0) * (p - 2.0))).backward()
        opt.step({"p": p.grad})
        opt.zero_grad()
    assert abs(p.data[0] - 2.0) < 1e-2


def test_step_counter_strictly_increments():
    p = Tensor(np.zeros(2), requires_grad=True)
    params = {"p": p}
    state = AdamState(params)
    for expected in (1, 2, 3):
        adam_step(params, {"p": np.ones(2)}, state)
        assert state.step == expected


def test_moment_shapes_match_params():
    p = Tensor(np.zeros((3, 4)), requires_grad=True)
    state = AdamState({"p": p})
    assert state.m["p"].shape == (3, 4)
    assert state.v["p"].shape == (3, 4)


def test_shape_mismatch_rejected():
    p = Tensor(np.zeros(3), requires_grad=True)
    params = {"p": p}
    state = AdamState(params)
    with pytest.raises(ShapeError):
        adam_step(params, {"p": np.zeros(4)}, state)


def test_bias_correction_first_step():
    # with bias correction, the very first step moves by ~lr regardless of
    # gradient magnitude (sign step)
    for g in (1e-4, 1.0, 1e4):
        p = Tensor(np.array([0.0]), requires_grad=True)
        params = {"p": p}
        adam_step(params, {"p": np.array([g])}, AdamState(params, lr=1e-3))
        assert p.data[0] == pytest.approx(-1e-3, rel=1e-4)
