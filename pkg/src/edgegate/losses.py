"""Loss terms: semantic Dice, balanced edge BCE, edge Dice, boundary consistency.

The total objective is the plain sum semantic + consistency + edge,
with the lambda weights confined to the edge term.  Models without an
edge head contribute exact zeros for the edge and consistency terms,
so their total reduces bit-exactly to the semantic loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .edges import EdgeMap, edges_from_labels, gradient_magnitude, sobel3d, soft_boundary
from .tensor import ShapeError, Tensor, TensorError


@dataclass(frozen=True)
class LossWeights:
    """Weights and constants of the loss suite.

    lambda1/lambda2 scale the edge Dice and edge BCE terms; zero
    disables a term.  consistency_full_volume switches the boundary
    L1 from ground-truth edge voxels to the whole volume (an
    experimentation knob, off by default).
    """

    lambda1: float = 1.0
    lambda2: float = 0.5
    dice_eps: float = 1e-5
    tau: float = 1.0
    consistency_full_volume: bool = False

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise TensorError("lambda weights must be non-negative")
        if self.dice_eps <= 0 or self.tau <= 0:
            raise TensorError("dice_eps and tau must be positive")


@dataclass(frozen=True)
class LossBundle:
    """The scalar loss terms of one forward pass; total = semantic + consistency + edge."""

    semantic: Tensor
    edge: Tensor
    consistency: Tensor
    total: Tensor

    def floats(self) -> dict[str, float]:
        return {
            "loss_semantic": self.semantic.item(),
            "loss_edge": self.edge.item(),
            "loss_consistency": self.consistency.item(),
            "loss_total": self.total.item(),
        }


def _zero() -> Tensor:
    return Tensor(np.zeros(()), requires_grad=False)


def dice_loss(pred_probs: Tensor, target_onehot: Tensor, eps: float = 1e-5) -> Tensor:
    """Soft Dice loss with squared-sum denominator, averaged over the batch.

    Per sample, sums run jointly over channels and voxels:
    1 - 2*sum(p*t) / (sum(t^2) + sum(p^2) + eps).
    """
    if pred_probs.shape != target_onehot.shape:
        raise ShapeError(
            f"dice_loss shape mismatch: {pred_probs.shape} vs {target_onehot.shape}"
        )
    if pred_probs.ndim < 2:
        raise ShapeError(f"dice_loss expects [N,K,...], got {pred_probs.shape}")
    if eps <= 0:
        raise TensorError("eps must be positive")
    axes = tuple(range(1, pred_probs.ndim))
    inter = T.reduce_sum(T.mul(pred_probs, target_onehot), axes=axes)
    denom = T.add_scalar(
        T.add(
            T.reduce_sum(T.mul(target_onehot, target_onehot), axes=axes),
            T.reduce_sum(T.mul(pred_probs, pred_probs), axes=axes),
        ),
        eps,
    )
    dice = T.div(T.scale(inter, 2.0), denom)
    return T.reduce_mean(T.add_scalar(T.neg(dice), 1.0))


def balanced_bce(edge_logits: Tensor, edge_true: EdgeMap) -> Tensor:
    """Class-balanced binary cross entropy over edge logits.

    beta is the non-edge fraction of the batch; edge voxels are weighted
    by beta, non-edge voxels by 1-beta, and the sum is normalized by the
    total voxel count.  Log terms go through softplus for stability:
    -log sigmoid(x) = softplus(-x).
    """
    if edge_logits.ndim != 5 or edge_logits.shape[1] != 1:
        raise ShapeError(f"edge logits must be [N,1,D,H,W], got {edge_logits.shape}")
    if edge_logits.shape != edge_true.values.shape:
        raise ShapeError(
            f"logits {edge_logits.shape} vs edge map {edge_true.values.shape}"
        )
    total = edge_logits.size
    if total == 0:
        raise ShapeError("balanced_bce on an empty volume")
    positives = edge_true.positive_count
    beta = (total - positives) / total
    pos_mask = edge_true.tensor()
    neg_mask = Tensor(1.0 - edge_true.values, requires_grad=False)
    pos_sum = T.reduce_sum(T.mul(T.softplus(T.neg(edge_logits)), pos_mask))
    neg_sum = T.reduce_sum(T.mul(T.softplus(edge_logits), neg_mask))
    combined = T.add(T.scale(pos_sum, beta), T.scale(neg_sum, 1.0 - beta))
    return T.scale(combined, 1.0 / total)


def edge_loss(edge_logits: Tensor, edge_true: EdgeMap, weights: LossWeights) -> Tensor:
    """lambda1 * Dice(sigmoid(logits), edges) + lambda2 * balanced BCE."""
    terms: list[Tensor] = []
    if weights.lambda1 > 0.0:
        probs = T.sigmoid(edge_logits)
        terms.append(T.scale(dice_loss(probs, edge_true.tensor(), weights.dice_eps), weights.lambda1))
    if weights.lambda2 > 0.0:
        terms.append(T.scale(balanced_bce(edge_logits, edge_true), weights.lambda2))
    if not terms:
        return _zero()
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return out


def consistency_loss(
    semantic_probs: Tensor,
    labels: np.ndarray,
    tau: float = 1.0,
    stochastic: bool = False,
    seed: int = 0,
    full_volume: bool = False,
    hard: bool = True,
    edge_map: Optional[EdgeMap] = None,
) -> Tensor:
    """Mean L1 gap between predicted and ground-truth boundary magnitudes.

    Both fields are Sobel magnitudes of class-index volumes; the mean is
    taken over the ground-truth edge voxels (or the whole volume with
    full_volume=True).  No edge voxels means no boundary to match: 0.
    Gradients reach semantic_probs through the straight-through
    boundary estimator.
    """
    if semantic_probs.ndim != 5:
        raise ShapeError(f"expected [N,K,D,H,W] probabilities, got {semantic_probs.shape}")
    num_classes = semantic_probs.shape[1]
    labels = np.asarray(labels)
    if labels.shape != (semantic_probs.shape[0],) + semantic_probs.shape[2:]:
        raise ShapeError(
            f"labels {labels.shape} do not match probabilities {semantic_probs.shape}"
        )
    if edge_map is None:
        edge_map = edges_from_labels(labels, num_classes)
    if not full_volume and edge_map.positive_count == 0:
        return _zero()
    label_field = Tensor(labels.astype(np.float64)[:, None], requires_grad=False)
    b_true = gradient_magnitude(sobel3d(label_field))
    b_pred = soft_boundary(semantic_probs, tau=tau, stochastic=stochastic, seed=seed, hard=hard)
    gap = T.abs_(T.sub(b_pred, b_true))
    if full_volume:
        return T.reduce_mean(gap)
    masked = T.reduce_sum(T.mul(gap, edge_map.tensor()))
    return T.scale(masked, 1.0 / edge_map.positive_count)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Labels [N,D,H,W] to one-hot [N,K,D,H,W] float64."""
    labels = np.asarray(labels)
    classes = np.arange(num_classes).reshape(1, num_classes, 1, 1, 1)
    return (labels[:, None] == classes).astype(np.float64)


def total_loss(
    semantic_logits: Tensor,
    edge_logits: Optional[Tensor],
    labels: np.ndarray,
    weights: LossWeights = LossWeights(),
    stochastic: bool = False,
    seed: int = 0,
    boundary_surrogate: bool = False,
    edge_map: Optional[EdgeMap] = None,
) -> LossBundle:
    """Compose the loss terms; edge_logits=None gates the edge and
    consistency terms to exact zeros (backbone-only training).

    boundary_surrogate swaps the hard straight-through boundary for its
    softened forward, making the whole objective finite-difference
    checkable; training uses the default hard path.  A precomputed
    edge_map skips the per-call ground-truth edge extraction.
    """
    num_classes = semantic_logits.shape[1]
    probs = T.softmax_channels(semantic_logits)
    target = Tensor(one_hot(labels, num_classes), requires_grad=False)
    semantic = dice_loss(probs, target, weights.dice_eps)
    if edge_logits is None:
        edge = _zero()
        consistency = _zero()
    else:
        if edge_map is None:
            edge_map = edges_from_labels(np.asarray(labels), num_classes)
        edge = edge_loss(edge_logits, edge_map, weights)
        consistency = consistency_loss(
            probs,
            labels,
            tau=weights.tau,
            stochastic=stochastic,
            seed=seed,
            full_volume=weights.consistency_full_volume,
            hard=not boundary_surrogate,
            edge_map=edge_map,
        )
    total = T.add(T.add(semantic, consistency), edge)
    return LossBundle(semantic=semantic, edge=edge, consistency=consistency, total=total)
