"""Sobel responses, label-edge extraction, and the straight-through boundary."""

import numpy as np
import pytest

from edgegate import tensor as T
from edgegate.edges import (
    EDGE_THRESHOLD,
    MAGNITUDE_EPS,
    EdgeMap,
    boundary_field,
    edges_from_labels,
    gradient_magnitude,
    gumbel_noise,
    sobel3d,
    sobel_kernels,
    soft_boundary,
)
from edgegate.tensor import ShapeError, Tape, Tensor, TensorError, backward
from oracles import edges_oracle, magnitude_oracle, sobel_kernel_oracle, sobel_oracle

RNG = np.random.default_rng(5)


def test_sobel_kernels_match_oracle_and_sum_to_zero():
    kernels = sobel_kernels()
    assert kernels.shape == (3, 1, 3, 3, 3)
    for axis in range(3):
        np.testing.assert_array_equal(kernels[axis, 0], sobel_kernel_oracle(axis))
        assert kernels[axis].sum() == 0.0


def test_sobel_matches_loop_oracle():
    x = RNG.normal(size=(2, 1, 4, 3, 5))
    got = sobel3d(Tensor(x))
    for n in range(2):
        np.testing.assert_allclose(got.data[n], sobel_oracle(x[n, 0]), atol=1e-12)


def test_sobel_zero_volume_is_zero():
    out = sobel3d(Tensor(np.zeros((1, 1, 4, 4, 4))))
    np.testing.assert_array_equal(out.data, 0.0)


def test_sobel_constant_volume_is_zero_in_the_interior():
    """Zero padding turns the volume faces of a nonzero constant into steps."""
    out = sobel3d(Tensor(np.full((1, 1, 5, 5, 5), 3.0))).data
    np.testing.assert_array_equal(out[:, :, 1:-1, 1:-1, 1:-1], 0.0)
    assert np.any(out != 0.0)  # border response exists


def test_sobel_ramp_response_is_32():
    """Unit ramp along depth: derivative span 2 times smoothing mass 16."""
    d = np.arange(6, dtype=np.float64)
    vol = np.broadcast_to(d[:, None, None], (6, 6, 6)).copy()
    out = sobel3d(Tensor(vol[None, None])).data[0]
    interior = (slice(1, -1),) * 3
    np.testing.assert_array_equal(out[0][interior], 32.0)
    np.testing.assert_array_equal(out[1][interior], 0.0)
    np.testing.assert_array_equal(out[2][interior], 0.0)


def test_sobel_reversed_ramp_negates():
    vol = RNG.normal(size=(1, 1, 5, 5, 5))
    a = sobel3d(Tensor(vol)).data
    b = sobel3d(Tensor(-vol)).data
    np.testing.assert_array_equal(a, -b)


def test_sobel_rejects_multi_channel():
    with pytest.raises(ShapeError):
        sobel3d(Tensor(np.zeros((1, 2, 3, 3, 3))))


def test_magnitude_matches_oracle():
    resp = RNG.normal(size=(1, 3, 3, 4, 2))
    got = gradient_magnitude(Tensor(resp))
    np.testing.assert_allclose(got.data[0, 0], magnitude_oracle(resp[0]), atol=1e-14)


def test_magnitude_of_zero_is_sqrt_eps():
    out = gradient_magnitude(Tensor(np.zeros((1, 3, 2, 2, 2))))
    np.testing.assert_allclose(out.data, np.sqrt(MAGNITUDE_EPS), atol=1e-20)


def test_magnitude_single_axis_is_abs():
    resp = np.zeros((1, 3, 2, 2, 2))
    resp[0, 1] = -7.0
    out = gradient_magnitude(Tensor(resp))
    np.testing.assert_allclose(out.data, 7.0, atol=1e-9)


def test_magnitude_validation():
    with pytest.raises(ShapeError):
        gradient_magnitude(Tensor(np.zeros((1, 2, 2, 2, 2))))
    with pytest.raises(TensorError):
        gradient_magnitude(Tensor(np.zeros((1, 3, 2, 2, 2))), eps=0.0)


def test_edge_map_validation():
    with pytest.raises(TensorError):
        EdgeMap(values=np.full((1, 1, 2, 2, 2), 0.5), num_classes=2)
    with pytest.raises(ShapeError):
        EdgeMap(values=np.zeros((1, 2, 2)), num_classes=2)
    m = EdgeMap(values=np.ones((1, 1, 2, 2, 2)), num_classes=2)
    assert m.positive_count == 8
    assert not m.tensor().requires_grad


def test_edges_constant_labels_are_empty():
    for fill in (0, 1):
        labels = np.full((1, 4, 4, 4), fill, dtype=np.int64)
        assert edges_from_labels(labels, 2).positive_count == 0


def test_edges_planar_split_hand_case():
    """Class 1 fills d >= 3 of a 6-cube: interface slab plus its border faces."""
    labels = np.zeros((1, 6, 6, 6), dtype=np.int64)
    labels[0, 3:] = 1
    got = edges_from_labels(labels, 2).values[0, 0]
    expected = np.zeros((6, 6, 6))
    expected[2:4] = 1.0  # one voxel each side of the interface
    expected[5] = 1.0  # far depth face of the foreground
    expected[3:, 0, :] = 1.0
    expected[3:, 5, :] = 1.0
    expected[3:, :, 0] = 1.0
    expected[3:, :, 5] = 1.0
    np.testing.assert_array_equal(got, expected)


def test_edges_single_voxel_is_26_neighborhood():
    """The stencil center weight is zero on every axis, so the voxel itself is not an edge."""
    labels = np.zeros((1, 5, 5, 5), dtype=np.int64)
    labels[0, 2, 2, 2] = 1
    got = edges_from_labels(labels, 2).values[0, 0]
    assert got.sum() == 26
    assert got[2, 2, 2] == 0.0
    assert got[1:4, 1:4, 1:4].sum() == 26


@pytest.mark.parametrize("shape", [(4, 4, 4), (5, 3, 4)])
def test_edges_match_oracle_on_random_labels(shape):
    labels = RNG.integers(0, 3, size=(3,) + shape)
    got = edges_from_labels(labels, 3)
    np.testing.assert_array_equal(got.values, edges_oracle(labels, 3))


def test_edges_are_invariant_under_foreground_permutation():
    labels = RNG.integers(0, 3, size=(2, 4, 4, 4))
    swapped = labels.copy()
    swapped[labels == 1] = 2
    swapped[labels == 2] = 1
    a = edges_from_labels(labels, 3).values
    b = edges_from_labels(swapped, 3).values
    np.testing.assert_array_equal(a, b)


def test_edges_validation():
    with pytest.raises(TensorError):
        edges_from_labels(np.zeros((1, 2, 2, 2)), 2)  # float labels
    with pytest.raises(TensorError):
        edges_from_labels(np.full((1, 2, 2, 2), 5, dtype=np.int64), 3)
    with pytest.raises(ShapeError):
        edges_from_labels(np.zeros((2, 2, 2), dtype=np.int64), 2)


def test_edges_are_deterministic():
    labels = RNG.integers(0, 4, size=(2, 5, 5, 5))
    a = edges_from_labels(labels, 4).values
    b = edges_from_labels(labels, 4).values
    np.testing.assert_array_equal(a, b)


def test_gumbel_noise_is_seeded():
    a = gumbel_noise((2, 3), seed=4)
    b = gumbel_noise((2, 3), seed=4)
    c = gumbel_noise((2, 3), seed=5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def _one_hot_probs(labels, num_classes, certainty=1.0):
    k = np.arange(num_classes).reshape(1, num_classes, 1, 1, 1)
    onehot = (labels[:, None] == k).astype(np.float64)
    uniform = np.full_like(onehot, 1.0 / num_classes)
    return certainty * onehot + (1 - certainty) * uniform


def test_boundary_field_recovers_labels_from_one_hot():
    labels = RNG.integers(0, 3, size=(1, 4, 4, 4))
    probs = _one_hot_probs(labels, 3, certainty=0.9)
    field = boundary_field(Tensor(probs))
    np.testing.assert_array_equal(field.data[:, 0], labels.astype(np.float64))


def test_boundary_field_breaks_ties_toward_lowest_class():
    probs = np.full((1, 2, 1, 1, 1), 0.5)
    field = boundary_field(Tensor(probs))
    assert field.data.reshape(()) == 0.0


def test_boundary_field_rejects_unnormalized():
    probs = np.full((1, 2, 1, 1, 1), 0.6)
    with pytest.raises(TensorError):
        boundary_field(Tensor(probs))
    with pytest.raises(TensorError):
        boundary_field(Tensor(np.full((1, 2, 1, 1, 1), 0.5)), tau=0.0)


def test_boundary_field_stochastic_is_seeded():
    probs = np.full((1, 3, 4, 4, 4), 1.0 / 3.0)  # noise decides everything
    a = boundary_field(Tensor(probs), stochastic=True, seed=1).data
    b = boundary_field(Tensor(probs), stochastic=True, seed=1).data
    c = boundary_field(Tensor(probs), stochastic=True, seed=2).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_boundary_field_soft_forward_is_expectation():
    """hard=False returns the tempered-softmax expectation of the class index."""
    probs = np.zeros((1, 2, 1, 1, 1))
    probs[0, 0] = 0.25
    probs[0, 1] = 0.75
    out = boundary_field(Tensor(probs), tau=1.0, hard=False)
    assert out.data.reshape(()) == pytest.approx(0.75, abs=1e-12)


def test_straight_through_jacobian_matches_analytic_softmax():
    """Single voxel, K=2: backward equals the closed-form tempered-softmax Jacobian."""
    tau = 0.37
    p = np.array([0.3, 0.7])
    probs = Tensor(p.reshape(1, 2, 1, 1, 1), requires_grad=True)
    with Tape():
        field = boundary_field(probs, tau=tau)
        backward(T.reduce_sum(field))
    got = probs.grad.reshape(2)

    # s_k = p_k^(1/tau) / sum_i p_i^(1/tau); field = sum_k k * s_k
    powered = p ** (1.0 / tau)
    s = powered / powered.sum()
    jac = np.zeros(2)
    for j in range(2):
        for k in range(2):
            jac[j] += k * s[k] * ((1.0 if k == j else 0.0) - s[j]) / (tau * p[j])
    np.testing.assert_allclose(got, jac, atol=1e-6)


def test_straight_through_gradient_flows_from_hard_forward():
    labels = RNG.integers(0, 2, size=(1, 4, 4, 4))
    probs = Tensor(_one_hot_probs(labels, 2, certainty=0.8), requires_grad=True)
    with Tape():
        backward(T.reduce_sum(soft_boundary(probs)))
    assert probs.grad is not None
    assert np.any(probs.grad != 0.0)


def test_soft_boundary_of_one_hot_equals_label_boundary():
    labels = RNG.integers(0, 3, size=(1, 5, 5, 5))
    probs = _one_hot_probs(labels, 3, certainty=0.9)
    got = soft_boundary(Tensor(probs)).data
    want = gradient_magnitude(sobel3d(Tensor(labels[:, None].astype(np.float64)))).data
    np.testing.assert_array_equal(got, want)


def test_edge_threshold_constant_is_tight():
    """A zero Sobel response (magnitude sqrt(eps)) must never count as an edge."""
    assert 0.0 < EDGE_THRESHOLD < 1.0
    assert np.sqrt(MAGNITUDE_EPS) <= EDGE_THRESHOLD  # comparison is strict ">"
