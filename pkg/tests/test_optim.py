"""Adam update math and the polynomial learning-rate schedule."""

import numpy as np
import pytest

from edgegate.optim import Adam, lr_schedule
from edgegate.tensor import TensorError, Tensor
from oracles import adam_oracle, lr_schedule_oracle

RNG = np.random.default_rng(23)


def test_schedule_endpoints_are_exact():
    assert lr_schedule(3e-4, 0, 100) == 3e-4
    assert lr_schedule(3e-4, 100, 100) == 0.0


def test_schedule_midpoint_frozen_value():
    assert lr_schedule(2e-3, 50, 100) == pytest.approx(2e-3 * 0.5**0.9, abs=1e-12)


def test_schedule_is_strictly_decreasing():
    values = [lr_schedule(1e-3, e, 20) for e in range(21)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_schedule_matches_oracle():
    for e in range(0, 30, 3):
        assert lr_schedule(5e-4, e, 30) == pytest.approx(
            lr_schedule_oracle(5e-4, e, 30), abs=1e-18
        )


def test_schedule_validation():
    with pytest.raises(TensorError):
        lr_schedule(1e-3, -1, 10)
    with pytest.raises(TensorError):
        lr_schedule(1e-3, 11, 10)
    with pytest.raises(TensorError):
        lr_schedule(1e-3, 0, 0)


def _param(value):
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)


def test_adam_matches_scalar_oracle_trajectory():
    grads = RNG.normal(size=7)
    p = _param([0.5])
    opt = Adam([("p", p)])
    for g in grads:
        p.grad = np.array([g])
        opt.step(lr=0.01)
    want = adam_oracle(0.5, grads, lr=0.01)
    assert p.data[0] == pytest.approx(want, abs=1e-15)


def test_adam_elementwise_independence():
    """A diagonal optimizer treats each coordinate as its own scalar problem."""
    grads = RNG.normal(size=(5, 3))
    p = _param(np.zeros(3))
    opt = Adam([("p", p)])
    for row in grads:
        p.grad = row.copy()
        opt.step(lr=0.05)
    for j in range(3):
        want = adam_oracle(0.0, grads[:, j], lr=0.05)
        assert p.data[j] == pytest.approx(want, abs=1e-15)


def test_adam_first_step_moves_by_almost_lr():
    """Bias correction makes |step 1| close to lr regardless of gradient scale."""
    for scale in (1e-6, 1.0, 1e6):
        p = _param([0.0])
        opt = Adam([("p", p)])
        p.grad = np.array([scale])
        opt.step(lr=0.1)
        assert abs(p.data[0]) == pytest.approx(0.1, rel=1e-2)


def test_adam_zero_gradient_leaves_parameter_unchanged():
    p = _param([1.23])
    opt = Adam([("p", p)])
    p.grad = np.array([0.0])
    opt.step(lr=0.1)
    assert p.data[0] == 1.23


def test_adam_requires_gradients():
    p = _param([0.0])
    opt = Adam([("p", p)])
    with pytest.raises(TensorError, match="no gradient"):
        opt.step(lr=0.1)
    p.grad = np.array([np.nan])
    with pytest.raises(TensorError, match="non-finite"):
        opt.step(lr=0.1)


def test_adam_zero_grad_clears_all():
    a, b = _param([0.0]), _param([0.0])
    opt = Adam([("a", a), ("b", b)])
    a.grad = np.array([1.0])
    b.grad = np.array([2.0])
    opt.zero_grad()
    assert a.grad is None and b.grad is None


def test_adam_state_round_trip():
    p = _param([0.7])
    opt = Adam([("p", p)])
    for g in (0.3, -0.2, 0.1):
        p.grad = np.array([g])
        opt.step(lr=0.02)
    state = {"t": opt.t, "m": {k: v.copy() for k, v in opt.m.items()},
             "v": {k: v.copy() for k, v in opt.v.items()}}

    q = _param(p.data.copy())
    restored = Adam([("p", q)])
    restored.load_state(state)
    for g in (0.5, -0.4):
        p.grad = np.array([g])
        opt.step(lr=0.02)
        q.grad = np.array([g])
        restored.step(lr=0.02)
    np.testing.assert_array_equal(p.data, q.data)


def test_adam_load_state_validation():
    p = _param([0.0])
    opt = Adam([("p", p)])
    with pytest.raises(TensorError):
        opt.load_state({"t": 1, "m": {}, "v": {}})
    with pytest.raises(TensorError):
        opt.load_state({"t": 1, "m": {"p": np.zeros(2)}, "v": {"p": np.zeros(2)}})
