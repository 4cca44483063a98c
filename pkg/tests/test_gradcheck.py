"""The finite-difference checker itself: it passes good ops and flags bad ones."""

import numpy as np
import pytest

from edgegate import tensor as T
from edgegate.gradcheck import CheckResult, check_gradients, run_suites
from edgegate.tensor import Tensor, accumulate_grad, record


def test_correct_gradient_scores_tiny_error():
    x = Tensor(np.linspace(-1.0, 1.5, 8).reshape(2, 4), requires_grad=True)

    def build():
        return T.reduce_sum(T.mul(T.sigmoid(x), x))

    assert check_gradients(build, [x]) < 1e-7


def test_wrong_backward_is_flagged():
    x = Tensor(np.linspace(0.5, 2.0, 6), requires_grad=True)

    def doubled_square(t: Tensor) -> Tensor:
        out = t.data * t.data
        # deliberately wrong scale: true derivative is 2t
        return record("bad_square", [t], out, lambda g: accumulate_grad(t, g * 3.0 * t.data))

    def build():
        return T.reduce_sum(doubled_square(x))

    assert check_gradients(build, [x]) > 0.1


def test_result_pass_threshold_is_strict():
    assert CheckResult("a", "m", 9.9e-5, 1e-4).passed
    assert not CheckResult("a", "m", 1e-4, 1e-4).passed


def test_module_filter_and_unknown_module():
    results = run_suites("edges")
    assert {r.module for r in results} == {"edges"}
    with pytest.raises(ValueError):
        run_suites("nonsense")
