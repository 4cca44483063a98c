"""Synthetic phantoms, normalization, dataset splits, and the EGV1 format.

Phantoms are nested ellipsoids: class c voxels live strictly inside the
eroded region of class c-1, so every foreground boundary is interior
and the nesting invariant (a class-c voxel only neighbors classes >=
c-1) holds by construction.  Intensities are class means plus Gaussian
noise, pre-rounded to float32 so EGV1 round trips are bit-exact.

EGV1 layout (little-endian):
    magic "EGV1" | u16 version=1 | u32 header length | header JSON
    (id, modality, spacing, C, K, D, H, W) | image payload C*D*H*W
    float32, row-major with W fastest | label payload D*H*W uint8.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .conv import conv3d_raw

MAGIC = b"EGV1"
FORMAT_VERSION = 1


class VolumeFormatError(ValueError):
    """Malformed EGV1 bytes or inconsistent record metadata."""


@dataclass
class VolumeRecord:
    """One labeled volume: image [C,D,H,W] float64, labels [D,H,W] ints."""

    image: np.ndarray
    labels: np.ndarray
    num_classes: int
    id: str
    modality: str = "mri-like"
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.image.ndim != 4:
            raise VolumeFormatError(f"image must be [C,D,H,W], got {self.image.shape}")
        if self.labels.shape != self.image.shape[1:]:
            raise VolumeFormatError(
                f"labels {self.labels.shape} do not match image {self.image.shape}"
            )
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise VolumeFormatError("labels must be integers")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise VolumeFormatError(
                f"labels outside [0, {self.num_classes}): "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )
        if self.modality not in ("mri-like", "ct-like"):
            raise VolumeFormatError(f"unknown modality {self.modality!r}")


@dataclass(frozen=True)
class PhantomSpec:
    """Controls for nested-ellipsoid phantom generation."""

    extent: int = 32
    num_classes: int = 3
    organs: tuple[int, int] = (1, 2)  # count range of class-1 ellipsoids
    lesions: tuple[int, int] = (1, 2)  # count range of each deeper class
    organ_radius: tuple[float, float] = (5.0, 9.0)  # semi-axis range, voxels
    lesion_fraction: tuple[float, float] = (0.35, 0.55)  # child/parent size ratio
    class_means: tuple[float, ...] = (0.1, 0.55, 1.0)
    noise_std: float = 0.05
    modality: str = "mri-like"
    seed: int = 0

    def __post_init__(self):
        if self.extent < 8:
            raise VolumeFormatError("extent must be >= 8")
        if self.num_classes < 1:
            raise VolumeFormatError("num_classes must be >= 1")
        if len(self.class_means) < self.num_classes:
            raise VolumeFormatError("need one intensity mean per class")
        if self.organs[0] < 1 or self.organs[0] > self.organs[1]:
            raise VolumeFormatError("invalid organ count range")
        if self.lesions[0] < 1 or self.lesions[0] > self.lesions[1]:
            raise VolumeFormatError("invalid lesion count range")


def _erode(mask: np.ndarray) -> np.ndarray:
    """26-neighborhood erosion with zero padding (shrinks away from borders)."""
    ones = np.ones((1, 1, 3, 3, 3))
    hits = conv3d_raw(mask[None, None].astype(np.float64), ones, None, stride=1, padding=1)
    return hits[0, 0] > 26.5


def _ellipsoid_mask(extent: int, center: np.ndarray, axes: np.ndarray) -> np.ndarray:
    grid = np.indices((extent, extent, extent), dtype=np.float64)
    q = sum(((grid[i] - center[i]) / axes[i]) ** 2 for i in range(3))
    return q <= 1.0


def _generate_labels(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    e = spec.extent
    labels = np.zeros((e, e, e), dtype=np.int64)
    parent_region = np.ones((e, e, e), dtype=bool)
    # (center, axes) of every ellipsoid at the previous nesting level
    parents: list[tuple[np.ndarray, np.ndarray]] = []
    for c in range(1, spec.num_classes):
        mask = np.zeros((e, e, e), dtype=bool)
        children: list[tuple[np.ndarray, np.ndarray]] = []
        if c == 1:
            count = int(rng.integers(spec.organs[0], spec.organs[1] + 1))
            for _ in range(count):
                axes = rng.uniform(spec.organ_radius[0], spec.organ_radius[1], size=3)
                lo = axes + 2.0
                hi = e - 1 - axes - 2.0
                center = rng.uniform(np.minimum(lo, hi), np.maximum(lo, hi))
                mask |= _ellipsoid_mask(e, center, axes)
                children.append((center, axes))
        else:
            count = int(rng.integers(spec.lesions[0], spec.lesions[1] + 1))
            for _ in range(count):
                p_center, p_axes = parents[int(rng.integers(len(parents)))]
                frac = rng.uniform(*spec.lesion_fraction)
                # offset keeps the child ellipsoid strictly inside the parent
                direction = rng.standard_normal(3)
                direction /= max(np.linalg.norm(direction), 1e-12)
                slack = rng.uniform(0.0, max(0.75 - frac, 0.0))
                center = p_center + direction * slack * p_axes
                axes = p_axes * frac
                mask |= _ellipsoid_mask(e, center, axes)
                children.append((center, axes))
        allowed = _erode(parent_region)
        region = mask & allowed
        labels[region] = c
        parent_region = region
        parents = children
        if not region.any():
            break
    return labels


def generate_phantom(spec: PhantomSpec) -> VolumeRecord:
    """Deterministic phantom for a spec; same seed gives identical records."""
    for attempt in range(20):
        rng = np.random.default_rng([spec.seed, attempt])
        labels = _generate_labels(spec, rng)
        if all((labels == c).any() for c in range(1, spec.num_classes)):
            break
    else:
        raise VolumeFormatError(f"could not place all classes for seed {spec.seed}")
    means = np.asarray(spec.class_means[: spec.num_classes])
    image = means[labels] + spec.noise_std * rng.standard_normal(labels.shape)
    image = image.astype(np.float32).astype(np.float64)[None]  # storage precision
    return VolumeRecord(
        image=image,
        labels=labels,
        num_classes=spec.num_classes,
        id=f"phantom-{spec.seed:06d}",
        modality=spec.modality,
        spacing=(1.0, 1.0, 1.0),
    )


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def normalize_mri(image: np.ndarray) -> np.ndarray:
    """Standardize to zero mean, unit std over nonzero voxels; zeros stay zero."""
    image = np.asarray(image, dtype=np.float64)
    nonzero = image != 0.0
    if not nonzero.any():
        raise VolumeFormatError("cannot normalize an all-zero image")
    vals = image[nonzero]
    std = vals.std()
    if std == 0.0:
        raise VolumeFormatError("zero variance over nonzero voxels")
    out = np.zeros_like(image)
    out[nonzero] = (vals - vals.mean()) / std
    return out


def normalize_ct(image: np.ndarray) -> np.ndarray:
    """Scale Hounsfield-like values by 1/1000 and clamp to [-1, 1]."""
    image = np.asarray(image, dtype=np.float64)
    return np.clip(image / 1000.0, -1.0, 1.0)


def normalize_record(record: VolumeRecord) -> np.ndarray:
    if record.modality == "ct-like":
        return normalize_ct(record.image)
    return normalize_mri(record.image)


# ---------------------------------------------------------------------------
# splits and manifests
# ---------------------------------------------------------------------------


def split_dataset(records: list, train_fraction: float = 0.8, seed: int = 0) -> tuple[list, list]:
    """Seeded shuffle, then split; both sides non-empty, union exhaustive."""
    if len(records) < 2:
        raise VolumeFormatError("need at least 2 records to split")
    if not (0.0 < train_fraction < 1.0):
        raise VolumeFormatError(f"train_fraction must be in (0,1), got {train_fraction}")
    order = np.random.default_rng(seed).permutation(len(records))
    n_train = int(np.clip(round(train_fraction * len(records)), 1, len(records) - 1))
    train = [records[i] for i in order[:n_train]]
    val = [records[i] for i in order[n_train:]]
    return train, val


def write_manifest(path, entries: list[tuple[str, str]], num_classes: int) -> None:
    """entries are (record path, split) pairs; paths stored relative to the manifest."""
    path = Path(path)
    payload = {
        "version": 1,
        "num_classes": num_classes,
        "records": [{"path": str(p), "split": s} for p, s in entries],
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_manifest(path) -> dict:
    path = Path(path)
    payload = json.loads(path.read_text(encoding="utf-8"))
    if payload.get("version") != 1:
        raise VolumeFormatError(f"unknown manifest version in {path}")
    for rec in payload["records"]:
        if rec["split"] not in ("train", "val"):
            raise VolumeFormatError(f"bad split {rec['split']!r} in {path}")
    payload["base_dir"] = str(path.parent)
    return payload


def manifest_records(manifest: dict, split: str) -> list[VolumeRecord]:
    base = Path(manifest["base_dir"])
    out = []
    for rec in manifest["records"]:
        if rec["split"] != split:
            continue
        p = Path(rec["path"])
        out.append(load_volume(p if p.is_absolute() else base / p))
    return out


# ---------------------------------------------------------------------------
# EGV1 serialization
# ---------------------------------------------------------------------------


def volume_header(record: VolumeRecord) -> bytes:
    c = record.image.shape[0]
    d, h, w = record.labels.shape
    header = {
        "C": c,
        "D": d,
        "H": h,
        "K": record.num_classes,
        "W": w,
        "id": record.id,
        "modality": record.modality,
        "spacing": [float(s) for s in record.spacing],
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_volume(record: VolumeRecord, path) -> None:
    if record.num_classes > 256:
        raise VolumeFormatError("uint8 labels support at most 256 classes")
    header = volume_header(record)
    blob = bytearray()
    blob += struct.pack("<4sHI", MAGIC, FORMAT_VERSION, len(header))
    blob += header
    blob += record.image.astype("<f4").tobytes(order="C")
    blob += record.labels.astype(np.uint8).tobytes(order="C")
    Path(path).write_bytes(bytes(blob))


def decode_volume(blob: bytes) -> VolumeRecord:
    if len(blob) < 10:
        raise VolumeFormatError("truncated file: missing fixed header")
    magic, version, header_len = struct.unpack_from("<4sHI", blob, 0)
    if magic != MAGIC:
        raise VolumeFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise VolumeFormatError(f"unsupported format version {version}")
    if len(blob) < 10 + header_len:
        raise VolumeFormatError("truncated file: header cut short")
    try:
        header = json.loads(blob[10 : 10 + header_len].decode("utf-8"))
        c, d, h, w = (int(header[k]) for k in ("C", "D", "H", "W"))
        num_classes = int(header["K"])
        rec_id = str(header["id"])
        modality = str(header["modality"])
        spacing = tuple(float(s) for s in header["spacing"])
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise VolumeFormatError(f"malformed header: {exc}") from exc
    if len(spacing) != 3:
        raise VolumeFormatError("spacing must have 3 entries")
    image_bytes = 4 * c * d * h * w
    label_bytes = d * h * w
    expected = 10 + header_len + image_bytes + label_bytes
    if len(blob) != expected:
        raise VolumeFormatError(
            f"payload size mismatch: file has {len(blob)} bytes, expected {expected}"
        )
    off = 10 + header_len
    image = np.frombuffer(blob, dtype="<f4", count=c * d * h * w, offset=off)
    image = image.reshape(c, d, h, w).astype(np.float64)
    labels = np.frombuffer(blob, dtype=np.uint8, count=d * h * w, offset=off + image_bytes)
    labels = labels.reshape(d, h, w).astype(np.int64)
    return VolumeRecord(
        image=image,
        labels=labels,
        num_classes=num_classes,
        id=rec_id,
        modality=modality,
        spacing=spacing,  # type: ignore[arg-type]
    )


def load_volume(path) -> VolumeRecord:
    return decode_volume(Path(path).read_bytes())
