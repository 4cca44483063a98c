"""Edge extraction and differentiable boundary fields.

Three fixed 3x3x3 Sobel kernels (derivative [-1,0,1] on one axis,
smoothing [1,2,1] on the other two, raw integer weights) drive both the
ground-truth edge maps and the differentiable boundary of the
consistency loss.  Boundary fields use a straight-through estimator:
the forward pass hard-argmaxes the class probabilities into a scalar
class-index field, the backward pass substitutes the Jacobian of a
temperature-tau softmax over (log p + Gumbel noise).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .conv import conv3d, conv3d_raw
from .tensor import (
    ShapeError,
    Tensor,
    TensorError,
    accumulate_grad,
    add_scalar,
    mul,
    record,
    reduce_sum,
    sqrt,
)

MAGNITUDE_EPS = 1e-12  # inside the sqrt; keeps the magnitude differentiable at 0
EDGE_THRESHOLD = 1e-6  # a voxel is an edge when any class magnitude exceeds this


def sobel_kernels() -> np.ndarray:
    """The three axis kernels as a conv weight [3, 1, 3, 3, 3].

    A unit ramp along an axis produces an interior response of 32 on
    that axis's kernel: stencil span 2 times the 16 smoothing weights.
    """
    deriv = np.array([-1.0, 0.0, 1.0])
    smooth = np.array([1.0, 2.0, 1.0])
    kernels = np.empty((3, 1, 3, 3, 3), dtype=np.float64)
    kernels[0, 0] = np.einsum("d,h,w->dhw", deriv, smooth, smooth)
    kernels[1, 0] = np.einsum("d,h,w->dhw", smooth, deriv, smooth)
    kernels[2, 0] = np.einsum("d,h,w->dhw", smooth, smooth, deriv)
    return kernels


_SOBEL_WEIGHT = Tensor(sobel_kernels(), requires_grad=False)


def sobel3d(volume: Tensor) -> Tensor:
    """Per-axis Sobel responses [N,3,D,H,W] of a single-channel volume.

    Zero padding at the borders: a nonzero field touching the volume
    face reads as a step there and produces a border response.
    """
    if volume.ndim != 5 or volume.shape[1] != 1:
        raise ShapeError(f"sobel3d expects [N,1,D,H,W], got {volume.shape}")
    return conv3d(volume, _SOBEL_WEIGHT, None, stride=1, padding=1)


def gradient_magnitude(responses: Tensor, eps: float = MAGNITUDE_EPS) -> Tensor:
    """Euclidean magnitude sqrt(gx^2+gy^2+gz^2+eps) as [N,1,D,H,W]."""
    if responses.ndim != 5 or responses.shape[1] != 3:
        raise ShapeError(f"gradient_magnitude expects [N,3,D,H,W], got {responses.shape}")
    if eps <= 0.0:
        raise TensorError("eps must be positive")
    total = reduce_sum(mul(responses, responses), axes=(1,), keepdims=True)
    return sqrt(add_scalar(total, eps))


def _validate_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 4:
        raise ShapeError(f"labels must be [N,D,H,W], got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise TensorError(f"labels must be integers, got dtype {labels.dtype}")
    if num_classes < 1:
        raise TensorError(f"num_classes must be >= 1, got {num_classes}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise TensorError(
            f"label values outside [0, {num_classes}): "
            f"found range [{labels.min()}, {labels.max()}]"
        )
    return labels


@dataclass(frozen=True)
class EdgeMap:
    """Binary boundary volume [N,1,D,H,W] with 1 marking edge voxels."""

    values: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.values.ndim != 5 or self.values.shape[1] != 1:
            raise ShapeError(f"EdgeMap values must be [N,1,D,H,W], got {self.values.shape}")
        if not np.all((self.values == 0.0) | (self.values == 1.0)):
            raise TensorError("EdgeMap values must be binary")

    @property
    def positive_count(self) -> int:
        return int(self.values.sum())

    def tensor(self) -> Tensor:
        return Tensor(self.values, requires_grad=False)


def edges_from_labels(labels: np.ndarray, num_classes: int) -> EdgeMap:
    """Ground-truth edges: union of per-class Sobel supports over nonzero classes.

    Each foreground class mask goes through sobel3d + gradient_magnitude;
    voxels whose magnitude exceeds the threshold for any class are edges.
    Background (class 0) contributes no edges of its own; its boundaries
    coincide with foreground boundaries anyway.  A spatially constant
    sample has no internal structure and maps to an empty edge set, which
    also suppresses the zero-padding border response a constant nonzero
    class would otherwise produce.
    """
    labels = _validate_labels(labels, num_classes)
    n = labels.shape[0]
    out = np.zeros((n, 1) + labels.shape[1:], dtype=np.float64)
    weight = sobel_kernels()
    varying = [i for i in range(n) if labels[i].min() != labels[i].max()]
    for c in range(1, num_classes):
        active = [i for i in varying if (labels[i] == c).any()]
        if not active:
            continue
        mask = (labels[active] == c).astype(np.float64)[:, None]
        resp = conv3d_raw(mask, weight, None, stride=1, padding=1)
        mag = np.sqrt((resp * resp).sum(axis=1, keepdims=True) + MAGNITUDE_EPS)
        out[active] = np.maximum(out[active], (mag > EDGE_THRESHOLD).astype(np.float64))
    return EdgeMap(values=out, num_classes=num_classes)


def gumbel_noise(shape, seed: int) -> np.ndarray:
    """Seeded standard Gumbel(0,1) samples via -log(-log(u)), u in (0,1)."""
    rng = np.random.default_rng(seed)
    u = rng.random(shape)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - 1e-16)
    return -np.log(-np.log(u))


def boundary_field(
    probabilities: Tensor,
    tau: float = 1.0,
    stochastic: bool = False,
    seed: int = 0,
    hard: bool = True,
) -> Tensor:
    """Per-voxel class-index field [N,1,D,H,W] from class probabilities.

    Forward: hard per-voxel argmax (ties to the lowest class index),
    over log p + Gumbel noise when stochastic.  Backward: the Jacobian
    of the field softened by a temperature-tau softmax, regardless of
    the forward mode (straight-through).  With hard=False the forward
    returns the softened field itself, which is what finite-difference
    checks differentiate.
    """
    if probabilities.ndim != 5:
        raise ShapeError(f"expected [N,K,D,H,W] probabilities, got {probabilities.shape}")
    if tau <= 0.0:
        raise TensorError(f"tau must be positive, got {tau}")
    p = probabilities.data
    col = p.sum(axis=1, keepdims=True)
    if np.abs(col - 1.0).max() > 1e-6:
        raise TensorError("probabilities must sum to 1 per voxel (within 1e-6)")
    k = p.shape[1]
    classes = np.arange(k, dtype=np.float64).reshape(1, k, 1, 1, 1)
    with np.errstate(divide="ignore"):
        logp = np.log(p)
    z = logp + gumbel_noise(p.shape, seed) if stochastic else logp
    # tempered softmax of z; the -inf entries from p=0 contribute exactly 0
    zt = z / tau
    zt = zt - zt.max(axis=1, keepdims=True)
    s = np.exp(zt)
    s /= s.sum(axis=1, keepdims=True)
    soft_field = (classes * s).sum(axis=1, keepdims=True)
    if hard:
        out = np.argmax(z, axis=1)[:, None].astype(np.float64)
    else:
        out = soft_field
    p_safe = np.maximum(p, np.finfo(np.float64).tiny)

    def bw(g: np.ndarray) -> None:
        grad = g * s * (classes - soft_field) / (tau * p_safe)
        accumulate_grad(probabilities, grad, fresh=True)

    return record("boundary_field", (probabilities,), out, bw)


def soft_boundary(
    probabilities: Tensor,
    tau: float = 1.0,
    stochastic: bool = False,
    seed: int = 0,
    hard: bool = True,
    eps: float = MAGNITUDE_EPS,
) -> Tensor:
    """Boundary magnitude of the predicted class field, [N,1,D,H,W]."""
    field = boundary_field(probabilities, tau=tau, stochastic=stochastic, seed=seed, hard=hard)
    return gradient_magnitude(sobel3d(field), eps=eps)
