"""Binary checkpoint container for model and optimizer state.

Layout (little-endian): magic "EGCK" | u16 version=1 | u32 header
length | header JSON | payload.  The header records the model config,
the completed epoch count, the Adam step counter, the training seed
(which, with the epoch, determines the derived per-epoch RNG streams),
and the ordered payload entries (name, shape, kind).  The payload is
the concatenation of the listed arrays as float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .nn import EgModel, ModelConfig
from .optim import Adam

MAGIC = b"EGCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint bytes or state mismatch."""


@dataclass
class Checkpoint:
    model_config: ModelConfig
    epoch: int
    adam_t: int
    train_seed: int
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]


def save_checkpoint(
    path,
    model: EgModel,
    adam: Optional[Adam],
    epoch: int,
    train_seed: int,
) -> None:
    params = model.parameters()
    entries = []
    arrays: list[np.ndarray] = []
    for name, p in params:
        entries.append({"name": name, "shape": list(p.shape), "kind": "param"})
        arrays.append(p.data)
    adam_t = 0
    if adam is not None:
        adam_t = adam.t
        for kind, moments in (("adam_m", adam.m), ("adam_v", adam.v)):
            for name, p in params:
                entries.append({"name": name, "shape": list(p.shape), "kind": kind})
                arrays.append(moments[name])
    header = {
        "model": model.config.to_header(),
        "epoch": int(epoch),
        "adam_t": int(adam_t),
        "train_seed": int(train_seed),
        "entries": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = bytearray()
    blob += struct.pack("<4sHI", MAGIC, FORMAT_VERSION, len(header_bytes))
    blob += header_bytes
    for arr in arrays:
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes(order="C")
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < 10:
        raise CheckpointError("truncated checkpoint: missing fixed header")
    magic, version, header_len = struct.unpack_from("<4sHI", blob, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(blob) < 10 + header_len:
        raise CheckpointError("truncated checkpoint: header cut short")
    try:
        header = json.loads(blob[10 : 10 + header_len].decode("utf-8"))
        config = ModelConfig.from_header(header["model"])
        entries = header["entries"]
        epoch = int(header["epoch"])
        adam_t = int(header["adam_t"])
        train_seed = int(header["train_seed"])
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from exc
    total = sum(int(np.prod(e["shape"])) for e in entries)
    expected = 10 + header_len + 8 * total
    if len(blob) != expected:
        raise CheckpointError(
            f"payload size mismatch: file has {len(blob)} bytes, expected {expected}"
        )
    buckets: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    off = 10 + header_len
    for e in entries:
        shape = tuple(int(s) for s in e["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
        kind = e["kind"]
        if kind not in buckets:
            raise CheckpointError(f"unknown payload kind {kind!r}")
        buckets[kind][e["name"]] = arr
    return Checkpoint(
        model_config=config,
        epoch=epoch,
        adam_t=adam_t,
        train_seed=train_seed,
        params=buckets["param"],
        adam_m=buckets["adam_m"],
        adam_v=buckets["adam_v"],
    )


def build_model(checkpoint: Checkpoint) -> EgModel:
    """Instantiate the checkpointed architecture and load its parameters."""
    model = EgModel(checkpoint.model_config)
    restore_params(model, checkpoint)
    return model


def restore_params(model: EgModel, checkpoint: Checkpoint) -> None:
    params = model.parameters()
    names = {name for name, _ in params}
    saved = set(checkpoint.params)
    if names != saved:
        missing = sorted(names - saved)
        extra = sorted(saved - names)
        raise CheckpointError(f"parameter mismatch: missing {missing}, unexpected {extra}")
    for name, p in params:
        arr = checkpoint.params[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
        p.assign_(arr)


def restore_adam(adam: Adam, checkpoint: Checkpoint) -> None:
    if not checkpoint.adam_m:
        raise CheckpointError("checkpoint carries no optimizer state")
    adam.load_state({"t": checkpoint.adam_t, "m": checkpoint.adam_m, "v": checkpoint.adam_v})
