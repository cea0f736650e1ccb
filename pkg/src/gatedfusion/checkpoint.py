"""Versioned binary checkpoints for model parameters.

Layout: 4 magic bytes, a little-endian uint16 format version, a uint32
length-prefixed JSON header (model config, ablation flags, seed, tensor
names/shapes, and a digest of the config), then the raw float64
little-endian tensor blobs in header order.  Round-tripping is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import CheckpointError
from .model import AblationConfig, ModelConfig, ModelParams

MAGIC = b"GFUS"
FORMAT_VERSION = 1


def _config_digest(model_config: ModelConfig, ablation: AblationConfig) -> str:
    doc = json.dumps(
        {"model_config": asdict(model_config), "ablation": asdict(ablation)},
        sort_keys=True,
    )
    return hashlib.sha256(doc.encode()).hexdigest()


@dataclass
class LoadedCheckpoint:
    params: ModelParams
    model_config: ModelConfig
    ablation: AblationConfig
    seed: Optional[int]


def save_checkpoint(
    path,
    params: ModelParams,
    model_config: ModelConfig,
    ablation: AblationConfig,
    seed: Optional[int] = None,
) -> None:
    entries = [(name, t.data) for name, t in params.named()]
    meta = {
        "model_config": asdict(model_config),
        "ablation": asdict(ablation),
        "seed": seed,
        "config_digest": _config_digest(model_config, ablation),
        "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in entries],
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> LoadedCheckpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 10 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, meta_len = struct.unpack("<HI", blob[4:10])
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} unsupported (expected {FORMAT_VERSION})"
        )
    if len(blob) < 10 + meta_len:
        raise CheckpointError(f"{path} is truncated inside the header")
    try:
        meta = json.loads(blob[10 : 10 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"checkpoint header is corrupt: {e}") from None

    try:
        model_config = ModelConfig(**meta["model_config"])
        ablation = AblationConfig(**meta["ablation"])
        tensor_meta = meta["tensors"]
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"checkpoint header incomplete: {e}") from None
    if meta.get("config_digest") != _config_digest(model_config, ablation):
        raise CheckpointError("checkpoint config digest mismatch")

    params = ModelParams.init(model_config, ablation, np.random.default_rng(0))
    named = dict(params.named())
    if set(named) != {entry["name"] for entry in tensor_meta}:
        raise CheckpointError("checkpoint tensor names do not match the model layout")

    offset = 10 + meta_len
    for entry in tensor_meta:
        tensor = named[entry["name"]]
        shape = tuple(entry["shape"])
        if tensor.data.shape != shape:
            raise CheckpointError(
                f"tensor {entry['name']} has shape {shape}, expected {tensor.data.shape}"
            )
        nbytes = tensor.data.size * 8
        chunk = blob[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path} is truncated inside tensor {entry['name']}")
        tensor.data[...] = np.frombuffer(chunk, dtype="<f8").reshape(shape)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path} has {len(blob) - offset} trailing bytes")
    return LoadedCheckpoint(
        params=params, model_config=model_config, ablation=ablation, seed=meta.get("seed")
    )
