"""Hard-prediction Dice metrics and the per-epoch metrics record."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import ShapeError


def dice_metric(pred_labels: np.ndarray, true_labels: np.ndarray, class_index: int) -> float:
    """2|A&B| / (|A|+|B|) for one class; both sets empty scores 1."""
    pred_labels = np.asarray(pred_labels)
    true_labels = np.asarray(true_labels)
    if pred_labels.shape != true_labels.shape:
        raise ShapeError(f"volume shapes differ: {pred_labels.shape} vs {true_labels.shape}")
    a = pred_labels == class_index
    b = true_labels == class_index
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def foreground_dice(pred_labels: np.ndarray, true_labels: np.ndarray) -> float:
    """Dice over the union of all nonzero classes."""
    pred_labels = np.asarray(pred_labels)
    true_labels = np.asarray(true_labels)
    if pred_labels.shape != true_labels.shape:
        raise ShapeError(f"volume shapes differ: {pred_labels.shape} vs {true_labels.shape}")
    a = pred_labels > 0
    b = true_labels > 0
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def per_class_dice(pred_labels, true_labels, num_classes: int) -> list[float]:
    return [dice_metric(pred_labels, true_labels, c) for c in range(num_classes)]


def mean_foreground_dice(pred_labels, true_labels, num_classes: int) -> float:
    if num_classes < 2:
        raise ShapeError("mean foreground Dice needs at least one foreground class")
    scores = [dice_metric(pred_labels, true_labels, c) for c in range(1, num_classes)]
    return float(np.mean(scores))


def composite_dice(pred_labels, true_labels, num_classes: int) -> Optional[float]:
    """Mean of whole-foreground Dice and lesion Dice (highest class index).

    Needs a background/organ/lesion labeling, so K >= 3; otherwise the
    score is omitted (None).
    """
    if num_classes < 3:
        return None
    organ = foreground_dice(pred_labels, true_labels)
    lesion = dice_metric(pred_labels, true_labels, num_classes - 1)
    return (organ + lesion) / 2.0


def edge_dice(edge_probs: np.ndarray, edge_true: np.ndarray, threshold: float = 0.5) -> float:
    """Dice between thresholded edge probabilities and the binary edge map."""
    pred = (np.asarray(edge_probs) > threshold).astype(np.int64)
    true = (np.asarray(edge_true) > 0.5).astype(np.int64)
    return dice_metric(pred, true, 1)


@dataclass
class MetricsRecord:
    """One structured line of the metrics log."""

    epoch: int
    split: str
    dice_per_class: list[float]
    dice_mean_foreground: float
    dice_composite: Optional[float]
    dice_edge: Optional[float]
    losses: dict[str, float] = field(default_factory=dict)
    lr: Optional[float] = None

    def __post_init__(self):
        for score in self.dice_per_class:
            if not (0.0 <= score <= 1.0):
                raise ValueError(f"Dice score {score} outside [0,1]")

    def to_json(self) -> str:
        payload = {
            "epoch": self.epoch,
            "split": self.split,
            "dice_per_class": self.dice_per_class,
            "dice_mean_foreground": self.dice_mean_foreground,
            "dice_composite": self.dice_composite,
            "dice_edge": self.dice_edge,
            "lr": self.lr,
        }
        payload.update(self.losses)
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        d = json.loads(line)
        losses = {k: v for k, v in d.items() if k.startswith("loss_")}
        return cls(
            epoch=d["epoch"],
            split=d["split"],
            dice_per_class=d["dice_per_class"],
            dice_mean_foreground=d["dice_mean_foreground"],
            dice_composite=d.get("dice_composite"),
            dice_edge=d.get("dice_edge"),
            losses=losses,
            lr=d.get("lr"),
        )
