"""BLDC checkpoint container.

Layout: ``b"BLDC"``, u16 version, u64 manifest length, UTF-8 JSON manifest,
then every tensor as contiguous little-endian float32 in manifest order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .model import ModelConfig
from .optim import AdamState

MAGIC = b"BLDC"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    adam: Optional[AdamState] = None
    epoch: int = -1
    best: dict[str, Any] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)  # fixed, non-trained tensors


def _tensors(ck: Checkpoint):
    yield from ((f"param.{k}", v) for k, v in ck.params.items())
    yield from ((f"buffer.{k}", v) for k, v in ck.buffers.items())
    if ck.adam is not None and ck.adam.m:
        yield from ((f"adam.m.{k}", v) for k, v in ck.adam.m.items())
        yield from ((f"adam.v.{k}", v) for k, v in ck.adam.v.items())


def save_checkpoint(ck: Checkpoint, path: str | Path) -> None:
    index, blobs, offset = [], [], 0
    for name, arr in _tensors(ck):
        a = np.ascontiguousarray(arr, dtype="<f4")
        index.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.size
    manifest = {
        "config": ck.config.to_json(),
        "tensors": index,
        "epoch": ck.epoch,
        "best": ck.best,
        "extra": ck.extra,
        "adam": None if ck.adam is None else {
            "t": ck.adam.t, "lr": ck.adam.lr, "beta1": ck.adam.beta1,
            "beta2": ck.adam.beta2, "eps": ck.adam.eps},
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HQ", VERSION, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a BLDC checkpoint")
    version, hlen = struct.unpack("<HQ", raw[4:14])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    manifest = json.loads(raw[14:14 + hlen].decode("utf-8"))
    payload = np.frombuffer(raw, dtype="<f4", offset=14 + hlen)
    tensors = {}
    for t in manifest["tensors"]:
        size = int(np.prod(t["shape"], dtype=np.int64))
        if t["offset"] + size > payload.size:
            raise CheckpointError(f"{path}: truncated payload")
        tensors[t["name"]] = payload[t["offset"]:t["offset"] + size].reshape(t["shape"]).astype(np.float32)
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param.")}
    buffers = {k[7:]: v for k, v in tensors.items() if k.startswith("buffer.")}
    adam = None
    if manifest.get("adam") is not None:
        h = manifest["adam"]
        adam = AdamState({k[7:]: v for k, v in tensors.items() if k.startswith("adam.m.")},
                         {k[7:]: v for k, v in tensors.items() if k.startswith("adam.v.")},
                         h["t"], h["lr"], h["beta1"], h["beta2"], h["eps"])
    return Checkpoint(ModelConfig.from_json(manifest["config"]), params, adam,
                      manifest["epoch"], manifest["best"], manifest.get("extra", {}), buffers)
