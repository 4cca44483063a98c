"""Training loop, evaluation, and prediction dumps.

Epoch-level randomness (batch order, stochastic boundary seeds) is
derived from (seed, epoch) rather than drawn from one sequential
stream, so resuming from a checkpoint replays the remaining epochs
bit-exactly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import (
    CheckpointError,
    build_model,
    load_checkpoint,
    restore_adam,
    restore_params,
    save_checkpoint,
)
from .data import (
    VolumeRecord,
    load_manifest,
    load_volume,
    manifest_records,
    normalize_record,
    save_volume,
)
from .edges import EdgeMap, edges_from_labels
from .losses import LossWeights, total_loss
from .metrics import (
    MetricsRecord,
    composite_dice,
    edge_dice,
    mean_foreground_dice,
    per_class_dice,
)
from .nn import EgModel, ModelConfig
from .optim import Adam, lr_schedule
from .tensor import Tape, Tensor, backward
from .tensor import _sigmoid as sigmoid_array


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    manifest: str
    out_dir: str
    batch_size: int = 2
    alpha0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0  # additionally checkpoint every k epochs; 0 = final only
    stochastic_boundary: bool = False
    weights: LossWeights = LossWeights()
    model: ModelConfig = ModelConfig()

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        if "model" in d and isinstance(d["model"], dict):
            d["model"] = ModelConfig(**d["model"])
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


@dataclass
class TrainResult:
    final_checkpoint: str
    metrics_path: str
    epochs_run: int
    train_metrics: Optional[MetricsRecord]
    val_metrics: Optional[MetricsRecord]


def _stack_records(records: list[VolumeRecord]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([normalize_record(r) for r in records])
    labels = np.stack([r.labels for r in records])
    return images, labels


def _batch_seed(seed: int, epoch: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, step]).generate_state(1)[0])


def _forward_arrays(model: EgModel, image: np.ndarray):
    """No-tape forward of a [N,1,D,H,W] batch; returns hard labels and edge probs."""
    sem, edge = model(Tensor(image))
    pred = np.argmax(sem.data, axis=1)
    edge_probs = None if edge is None else sigmoid_array(edge.data)
    return pred, edge_probs


def _aggregate_metrics(
    preds: np.ndarray,
    edge_probs: Optional[np.ndarray],
    labels: np.ndarray,
    num_classes: int,
    epoch: int,
    split: str,
    losses: Optional[dict] = None,
    lr: Optional[float] = None,
    true_edges: Optional[np.ndarray] = None,
) -> MetricsRecord:
    """Per-record scores averaged over the set (challenge convention)."""
    per_class = np.mean(
        [per_class_dice(preds[i], labels[i], num_classes) for i in range(len(labels))], axis=0
    )
    mean_fg = float(
        np.mean([mean_foreground_dice(preds[i], labels[i], num_classes) for i in range(len(labels))])
    )
    composites = [composite_dice(preds[i], labels[i], num_classes) for i in range(len(labels))]
    composite = None if composites[0] is None else float(np.mean([c for c in composites]))
    dice_e = None
    if edge_probs is not None:
        if true_edges is None:
            true_edges = edges_from_labels(labels, num_classes).values
        dice_e = float(
            np.mean(
                [edge_dice(edge_probs[i], true_edges[i]) for i in range(len(labels))]
            )
        )
    return MetricsRecord(
        epoch=epoch,
        split=split,
        dice_per_class=[float(x) for x in per_class],
        dice_mean_foreground=mean_fg,
        dice_composite=composite,
        dice_edge=dice_e,
        losses=losses or {},
        lr=lr,
    )


def train(config: TrainConfig, resume_from: Optional[str] = None) -> TrainResult:
    """Run the optimization loop; writes metrics.jsonl and checkpoints to out_dir.

    Train-split metrics come from the predictions the training batches
    already produced (so they trail the parameter updates within an
    epoch); the validation split gets a fresh deterministic pass.
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(config.manifest)
    if int(manifest["num_classes"]) != config.model.num_classes:
        raise ValueError(
            f"manifest has {manifest['num_classes']} classes, model expects "
            f"{config.model.num_classes}"
        )
    train_records = manifest_records(manifest, "train")
    if not train_records:
        raise ValueError(f"no training records in {config.manifest}")
    val_records = manifest_records(manifest, "val")
    x_train, y_train = _stack_records(train_records)
    x_val, y_val = _stack_records(val_records) if val_records else (None, None)

    model = EgModel(config.model)
    adam = Adam(model.parameters(), config.beta1, config.beta2, config.adam_eps)
    start_epoch = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.model_config != config.model:
            raise CheckpointError("checkpoint model config does not match training config")
        if ckpt.train_seed != config.seed:
            raise CheckpointError(
                f"checkpoint was trained with seed {ckpt.train_seed}, config has {config.seed}"
            )
        restore_params(model, ckpt)
        if ckpt.adam_m:
            restore_adam(adam, ckpt)
        start_epoch = ckpt.epoch
        if start_epoch > config.epochs:
            raise CheckpointError(
                f"checkpoint is at epoch {start_epoch}, beyond configured {config.epochs}"
            )

    metrics_path = out_dir / "metrics.jsonl"
    mode = "a" if (resume_from is not None and metrics_path.exists()) else "w"
    n = len(train_records)
    num_classes = config.model.num_classes
    last_train: Optional[MetricsRecord] = None
    last_val: Optional[MetricsRecord] = None
    # ground-truth edges are fixed per record; extract them once
    train_edges = edges_from_labels(y_train, num_classes) if config.model.edge_stream else None
    val_edges = (
        edges_from_labels(y_val, num_classes)
        if config.model.edge_stream and y_val is not None
        else None
    )

    with open(metrics_path, mode, encoding="utf-8") as metrics_file:
        for epoch in range(start_epoch, config.epochs):
            lr = lr_schedule(config.alpha0, epoch, config.epochs)
            order = np.random.default_rng([config.seed, epoch]).permutation(n)
            loss_sums: dict[str, float] = {}
            batch_count = 0
            epoch_preds = np.zeros_like(y_train)
            epoch_edges = (
                np.zeros((n, 1) + y_train.shape[1:]) if config.model.edge_stream else None
            )
            for step in range(0, n, config.batch_size):
                idx = order[step : step + config.batch_size]
                x = Tensor(x_train[idx])
                batch_edges = (
                    None
                    if train_edges is None
                    else EdgeMap(values=train_edges.values[idx], num_classes=num_classes)
                )
                with Tape():
                    sem, edge = model(x)
                    bundle = total_loss(
                        sem,
                        edge,
                        y_train[idx],
                        config.weights,
                        stochastic=config.stochastic_boundary,
                        seed=_batch_seed(config.seed, epoch, step),
                        edge_map=batch_edges,
                    )
                    backward(bundle.total)
                adam.step(lr)
                adam.zero_grad()
                epoch_preds[idx] = np.argmax(sem.data, axis=1)
                if edge is not None and epoch_edges is not None:
                    epoch_edges[idx] = sigmoid_array(edge.data)
                for key, value in bundle.floats().items():
                    loss_sums[key] = loss_sums.get(key, 0.0) + value
                batch_count += 1
            losses = {k: v / batch_count for k, v in loss_sums.items()}
            last_train = _aggregate_metrics(
                epoch_preds,
                epoch_edges,
                y_train,
                num_classes,
                epoch + 1,
                "train",
                losses,
                lr,
                true_edges=None if train_edges is None else train_edges.values,
            )
            metrics_file.write(last_train.to_json() + "\n")
            if val_records:
                preds, edges = _predict_set(model, x_val)
                last_val = _aggregate_metrics(
                    preds,
                    edges,
                    y_val,
                    num_classes,
                    epoch + 1,
                    "val",
                    true_edges=None if val_edges is None else val_edges.values,
                )
                metrics_file.write(last_val.to_json() + "\n")
            metrics_file.flush()
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(
                    out_dir / f"checkpoint_epoch{epoch + 1:04d}.egck",
                    model,
                    adam,
                    epoch + 1,
                    config.seed,
                )
    final_path = out_dir / "checkpoint_final.egck"
    save_checkpoint(final_path, model, adam, config.epochs, config.seed)
    return TrainResult(
        final_checkpoint=str(final_path),
        metrics_path=str(metrics_path),
        epochs_run=config.epochs - start_epoch,
        train_metrics=last_train,
        val_metrics=last_val,
    )


def _predict_set(model: EgModel, images: np.ndarray):
    """Record-by-record deterministic forward over a stacked set."""
    preds = []
    edges = []
    for i in range(images.shape[0]):
        p, e = _forward_arrays(model, images[i : i + 1])
        preds.append(p[0])
        if e is not None:
            edges.append(e[0])
    return np.stack(preds), (np.stack(edges) if edges else None)


def evaluate(
    checkpoint_path,
    manifest_path,
    split: str,
    metrics_out: Optional[str] = None,
) -> MetricsRecord:
    """Deterministic metrics of a checkpoint on one manifest split."""
    ckpt = load_checkpoint(checkpoint_path)
    model = build_model(ckpt)
    manifest = load_manifest(manifest_path)
    if int(manifest["num_classes"]) != ckpt.model_config.num_classes:
        raise ValueError(
            f"manifest has {manifest['num_classes']} classes, checkpoint expects "
            f"{ckpt.model_config.num_classes}"
        )
    records = manifest_records(manifest, split)
    if not records:
        raise ValueError(f"no records for split {split!r} in {manifest_path}")
    images, labels = _stack_records(records)
    preds, edges = _predict_set(model, images)
    record = _aggregate_metrics(
        preds, edges, labels, ckpt.model_config.num_classes, ckpt.epoch, split
    )
    if metrics_out is not None:
        with open(metrics_out, "a", encoding="utf-8") as fh:
            fh.write(record.to_json() + "\n")
    return record


_RENDER_RAMP = " .:-=+*#%@"


def _render_slice(plane: np.ndarray, discrete: bool) -> str:
    lines = []
    for row in plane:
        if discrete:
            lines.append("".join(str(int(v) % 10) for v in row))
        else:
            idx = np.clip(row * (len(_RENDER_RAMP) - 1), 0, len(_RENDER_RAMP) - 1)
            lines.append("".join(_RENDER_RAMP[int(v)] for v in idx))
    return "\n".join(lines) + "\n"


def predict(checkpoint_path, input_path, out_dir) -> dict[str, str]:
    """Dump predicted labels and edge probabilities for one volume.

    Writes EGV1 files (labels with the source image; edge probabilities
    as a [0,1] image with their 0.5-threshold mask as labels) plus
    axial mid-slice text renders.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(checkpoint_path)
    model = build_model(ckpt)
    record = load_volume(input_path)
    if record.num_classes != ckpt.model_config.num_classes:
        raise ValueError(
            f"volume {record.id!r} has {record.num_classes} classes, checkpoint expects "
            f"{ckpt.model_config.num_classes}"
        )
    image = normalize_record(record)[None]
    pred, edge_probs = _forward_arrays(model, image)
    written: dict[str, str] = {}

    label_rec = VolumeRecord(
        image=record.image,
        labels=pred[0].astype(np.int64),
        num_classes=record.num_classes,
        id=f"{record.id}-pred",
        modality=record.modality,
        spacing=record.spacing,
    )
    label_path = out / "pred_labels.egv1"
    save_volume(label_rec, label_path)
    written["labels"] = str(label_path)

    mid = record.labels.shape[0] // 2
    slice_path = out / "pred_labels_slice.txt"
    slice_path.write_text(_render_slice(pred[0][mid], discrete=True), encoding="utf-8")
    written["labels_slice"] = str(slice_path)

    if edge_probs is not None:
        edge_rec = VolumeRecord(
            image=edge_probs[0].astype(np.float32).astype(np.float64),
            labels=(edge_probs[0, 0] > 0.5).astype(np.int64),
            num_classes=2,
            id=f"{record.id}-edges",
            modality=record.modality,
            spacing=record.spacing,
        )
        edge_path = out / "pred_edges.egv1"
        save_volume(edge_rec, edge_path)
        written["edges"] = str(edge_path)
        edge_slice = out / "pred_edges_slice.txt"
        edge_slice.write_text(_render_slice(edge_probs[0, 0][mid], discrete=False), encoding="utf-8")
        written["edges_slice"] = str(edge_slice)
    return written
