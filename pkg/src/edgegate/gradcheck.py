"""Central finite-difference gradient checks for every differentiable path.

Each registered check rebuilds a small scalar loss, compares the taped
gradients against central differences (h=1e-5) on a sample of
coordinates, and reports the worst relative error.  The consistency
loss is checked through its softened boundary surrogate, since the
hard straight-through forward is piecewise constant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .conv import conv3d, trilinear_upsample
from .edges import gradient_magnitude, sobel3d, soft_boundary
from .losses import LossWeights, balanced_bce, consistency_loss, dice_loss, edge_loss, total_loss
from .edges import edges_from_labels
from .nn import Backbone, EdgeGatedLayer, EgModel, ModelConfig, ResidualBlock
from .tensor import Tape, Tensor, backward

FD_STEP = 1e-5
DEFAULT_THRESHOLD = 1e-4
SURROGATE_THRESHOLD = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    module: str
    max_rel_error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.threshold


def _rel_error(analytic: float, numeric: float) -> float:
    scale = max(abs(analytic), abs(numeric), 1e-6)
    return abs(analytic - numeric) / scale


def check_gradients(
    build_loss: Callable[[], Tensor],
    leaves: list[Tensor],
    max_coords: int = 24,
    seed: int = 0,
    h: float = FD_STEP,
) -> float:
    """Worst relative error between taped and finite-difference gradients."""
    with Tape():
        loss = build_loss()
        backward(loss)
    grads = [None if leaf.grad is None else leaf.grad.copy() for leaf in leaves]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for leaf, grad in zip(leaves, grads):
        assert grad is not None, "leaf did not receive a gradient"
        size = leaf.size
        if size <= max_coords:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=max_coords, replace=False)
        base = leaf.data.copy()
        flat = base.reshape(-1)
        for c in coords:
            orig = float(flat[c])
            flat[c] = orig + h
            leaf.assign_(base)
            up = build_loss().item()
            flat[c] = orig - h
            leaf.assign_(base)
            down = build_loss().item()
            flat[c] = orig
            leaf.assign_(base)
            fd = (up - down) / (2.0 * h)
            worst = max(worst, _rel_error(float(grad.reshape(-1)[c]), fd))
    return worst


def _run_check(build, leaves, **kw) -> float:
    return check_gradients(build, leaves, **kw)


# ---------------------------------------------------------------------------
# check definitions
# ---------------------------------------------------------------------------


def _rand(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _weighted_sum(t: Tensor, rng) -> Tensor:
    w = Tensor(rng.standard_normal(t.shape))
    return T.reduce_sum(T.mul(t, w))


def _check_conv(stride: int, padding: int, kernel: int) -> float:
    rng = np.random.default_rng(11)
    x = _rand(rng, 1, 2, 4, 4, 4)
    w = Tensor(0.3 * rng.standard_normal((2, 2, kernel, kernel, kernel)), requires_grad=True)
    b = _rand(rng, 2)

    def build():
        return _weighted_sum(conv3d(x, w, b, stride=stride, padding=padding), np.random.default_rng(5))

    return _run_check(build, [x, w, b])


def _check_upsample(scale: int) -> float:
    rng = np.random.default_rng(13)
    x = _rand(rng, 1, 2, 3, 2, 3)

    def build():
        return _weighted_sum(trilinear_upsample(x, scale), np.random.default_rng(6))

    return _run_check(build, [x])


def _check_unary(op, offset: float, seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(np.abs(rng.standard_normal((3, 4, 5))) + offset, requires_grad=True)

    def build():
        return _weighted_sum(op(x), np.random.default_rng(7))

    return _run_check(build, [x])


def _check_binary() -> float:
    rng = np.random.default_rng(17)
    a = _rand(rng, 2, 3, 3)
    b = Tensor(rng.standard_normal((2, 3, 3)) + 3.0, requires_grad=True)  # keep divisors off 0

    def build():
        mix = T.add(T.mul(a, b), T.sub(T.div(a, b), T.scale(a, 0.7)))
        return _weighted_sum(T.add_scalar(mix, 0.1), np.random.default_rng(8))

    return _run_check(build, [a, b])


def _check_softmax() -> float:
    rng = np.random.default_rng(19)
    x = _rand(rng, 1, 3, 2, 2, 2)

    def build():
        return _weighted_sum(T.softmax_channels(x), np.random.default_rng(9))

    return _run_check(build, [x])


def _check_group_norm() -> float:
    rng = np.random.default_rng(23)
    x = _rand(rng, 2, 4, 3, 3, 3)
    gamma = Tensor(1.0 + 0.1 * rng.standard_normal(4), requires_grad=True)
    beta = Tensor(0.1 * rng.standard_normal(4), requires_grad=True)

    def build():
        return _weighted_sum(T.group_norm(x, gamma, beta, 2), np.random.default_rng(10))

    return _run_check(build, [x, gamma, beta])


def _check_shape_ops() -> float:
    rng = np.random.default_rng(29)
    a = _rand(rng, 1, 2, 3, 3, 3)
    b = _rand(rng, 1, 1, 3, 3, 3)

    def build():
        cat = T.concat_channels([a, T.expand_channel(b, 2)])
        part = T.slice_channels(cat, 1, 3)
        return _weighted_sum(T.reshape(part, (2, 27)), np.random.default_rng(11))

    return _run_check(build, [a, b])


def _check_reductions() -> float:
    rng = np.random.default_rng(31)
    x = _rand(rng, 2, 3, 4)

    def build():
        s = T.reduce_sum(x, axes=(2,))
        m = T.reduce_mean(x, axes=(0, 1))
        return T.add(T.reduce_sum(T.mul(s, s)), T.reduce_mean(T.sqrt(T.add_scalar(T.mul(m, m), 1.0))))

    return _run_check(build, [x])


def _check_residual_block() -> float:
    rng = np.random.default_rng(37)
    block = ResidualBlock(2, rng, max_groups=2)
    x = _rand(rng, 1, 2, 4, 4, 4)
    leaves = [x] + [p for _, p in block.parameters()]

    def build():
        return _weighted_sum(block(x), np.random.default_rng(12))

    return _run_check(build, leaves, max_coords=6)


def _check_edge_gated_layer() -> float:
    rng = np.random.default_rng(41)
    gate = EdgeGatedLayer(2, 3, 0, rng)
    e = _rand(rng, 1, 2, 4, 4, 4)
    m = _rand(rng, 1, 3, 4, 4, 4)
    leaves = [e, m] + [p for _, p in gate.parameters()]

    def build():
        return _weighted_sum(gate(e, m), np.random.default_rng(13))

    return _run_check(build, leaves, max_coords=8)


def _check_backbone() -> float:
    rng = np.random.default_rng(43)
    config = ModelConfig(resolutions=1, base_channels=2, num_classes=2, groups=2, seed=7)
    bb = Backbone(config, rng)
    x = _rand(rng, 1, 1, 4, 4, 4)
    params = [p for _, p in bb.parameters()]
    leaves = [x] + params[:2] + params[-2:]

    def build():
        feats, _ = bb(x)
        return _weighted_sum(feats, np.random.default_rng(14))

    return _run_check(build, leaves, max_coords=4)


def _check_sobel_chain() -> float:
    rng = np.random.default_rng(47)
    x = _rand(rng, 1, 1, 4, 4, 4)

    def build():
        return _weighted_sum(gradient_magnitude(sobel3d(x)), np.random.default_rng(15))

    return _run_check(build, [x])


def _softmax_probs(logits: Tensor) -> Tensor:
    return T.softmax_channels(logits)


def _check_soft_boundary_surrogate() -> float:
    rng = np.random.default_rng(53)
    logits = _rand(rng, 1, 2, 4, 4, 4)

    def build():
        probs = _softmax_probs(logits)
        return _weighted_sum(soft_boundary(probs, tau=1.0, hard=False), np.random.default_rng(16))

    return _run_check(build, [logits], max_coords=20)


def _fixed_labels() -> np.ndarray:
    labels = np.zeros((1, 4, 4, 4), dtype=np.int64)
    labels[0, 1:3, 1:3, 1:3] = 1
    return labels


def _check_dice() -> float:
    rng = np.random.default_rng(59)
    logits = _rand(rng, 1, 2, 4, 4, 4)
    from .losses import one_hot

    target = Tensor(one_hot(_fixed_labels(), 2))

    def build():
        return dice_loss(_softmax_probs(logits), target)

    return _run_check(build, [logits], max_coords=20)


def _check_balanced_bce() -> float:
    rng = np.random.default_rng(61)
    logits = _rand(rng, 1, 1, 4, 4, 4)
    edges = edges_from_labels(_fixed_labels(), 2)

    def build():
        return balanced_bce(logits, edges)

    return _run_check(build, [logits], max_coords=20)


def _check_edge_loss() -> float:
    rng = np.random.default_rng(67)
    logits = _rand(rng, 1, 1, 4, 4, 4)
    edges = edges_from_labels(_fixed_labels(), 2)

    def build():
        return edge_loss(logits, edges, LossWeights())

    return _run_check(build, [logits], max_coords=20)


def _check_consistency_surrogate() -> float:
    rng = np.random.default_rng(71)
    logits = _rand(rng, 1, 2, 4, 4, 4)
    labels = _fixed_labels()

    def build():
        return consistency_loss(_softmax_probs(logits), labels, tau=1.0, hard=False)

    return _run_check(build, [logits], max_coords=20)


def _check_full_model() -> float:
    """Loss of the full model against finite differences on sampled parameters."""
    config = ModelConfig(resolutions=1, base_channels=2, num_classes=2, groups=2, seed=3)
    model = EgModel(config)
    rng = np.random.default_rng(73)
    x = Tensor(rng.standard_normal((1, 1, 4, 4, 4)))
    labels = _fixed_labels()
    params = [p for _, p in model.parameters()]
    picks = rng.choice(len(params), size=min(20, len(params)), replace=False)
    leaves = [params[i] for i in sorted(picks)]

    def build():
        sem, edge = model(x)
        return total_loss(sem, edge, labels, boundary_surrogate=True).total

    return _run_check(build, leaves, max_coords=1, seed=5)


CHECKS: list[tuple[str, str, float, Callable[[], float]]] = [
    ("conv3d_k3_pad1", "autodiff", DEFAULT_THRESHOLD, lambda: _check_conv(1, 1, 3)),
    ("conv3d_k3_stride2", "autodiff", DEFAULT_THRESHOLD, lambda: _check_conv(2, 1, 3)),
    ("conv3d_k2_valid", "autodiff", DEFAULT_THRESHOLD, lambda: _check_conv(1, 0, 2)),
    ("conv3d_k1", "autodiff", DEFAULT_THRESHOLD, lambda: _check_conv(1, 0, 1)),
    ("trilinear_upsample_x2", "autodiff", DEFAULT_THRESHOLD, lambda: _check_upsample(2)),
    ("trilinear_upsample_x3", "autodiff", DEFAULT_THRESHOLD, lambda: _check_upsample(3)),
    ("relu", "autodiff", DEFAULT_THRESHOLD, lambda: _check_unary(T.relu, 0.05, 101)),
    ("sigmoid", "autodiff", DEFAULT_THRESHOLD, lambda: _check_unary(T.sigmoid, 0.0, 102)),
    ("softplus", "autodiff", DEFAULT_THRESHOLD, lambda: _check_unary(T.softplus, 0.0, 103)),
    ("abs", "autodiff", DEFAULT_THRESHOLD, lambda: _check_unary(T.abs_, 0.05, 104)),
    ("sqrt", "autodiff", DEFAULT_THRESHOLD, lambda: _check_unary(T.sqrt, 0.5, 105)),
    ("elementwise_arithmetic", "autodiff", DEFAULT_THRESHOLD, _check_binary),
    ("softmax_channels", "autodiff", DEFAULT_THRESHOLD, _check_softmax),
    ("group_norm", "autodiff", DEFAULT_THRESHOLD, _check_group_norm),
    ("concat_slice_expand_reshape", "autodiff", DEFAULT_THRESHOLD, _check_shape_ops),
    ("reductions", "autodiff", DEFAULT_THRESHOLD, _check_reductions),
    ("residual_block", "blocks", DEFAULT_THRESHOLD, _check_residual_block),
    ("edge_gated_layer", "blocks", DEFAULT_THRESHOLD, _check_edge_gated_layer),
    ("backbone", "blocks", DEFAULT_THRESHOLD, _check_backbone),
    ("sobel_magnitude", "edges", DEFAULT_THRESHOLD, _check_sobel_chain),
    ("soft_boundary_surrogate", "edges", SURROGATE_THRESHOLD, _check_soft_boundary_surrogate),
    ("dice_loss", "losses", DEFAULT_THRESHOLD, _check_dice),
    ("balanced_bce", "losses", DEFAULT_THRESHOLD, _check_balanced_bce),
    ("edge_loss", "losses", DEFAULT_THRESHOLD, _check_edge_loss),
    ("consistency_surrogate", "losses", SURROGATE_THRESHOLD, _check_consistency_surrogate),
    ("full_model_sampled_params", "model", DEFAULT_THRESHOLD, _check_full_model),
]


def run_suites(module: str | None = None) -> list[CheckResult]:
    results = []
    for name, mod, threshold, fn in CHECKS:
        if module is not None and mod != module:
            continue
        results.append(
            CheckResult(name=name, module=mod, max_rel_error=float(fn()), threshold=threshold)
        )
    if not results:
        raise ValueError(f"no gradient checks in module {module!r}")
    return results
