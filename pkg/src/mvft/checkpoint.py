"""Checkpoint container.

File layout (all integers little-endian)::

    b"MVFTCKPT"                 8-byte magic
    u64 header_length
    header                      UTF-8 JSON, keys sorted
    payload                     float64 little-endian tensors, back to back
    sha256(everything above)    32 bytes

The header carries ``version``, ``epoch``, ``best_val_accuracy``, the config
echo, the Adam scalars (lr, betas, eps, step counter) and a tensor index of
``{"name", "shape", "offset"}`` entries. Tensor names are prefixed
``param/``, ``adam_m/``, ``adam_v/`` or ``norm/``. Floats in the header are
written with ``repr`` precision, so a round trip is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optim import AdamState

MAGIC = b"MVFTCKPT"
VERSION = 1
_DIGEST = 32


class CheckpointError(Exception):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam: AdamState
    epoch: int
    config: dict
    best_val_accuracy: float
    normalizer: dict[str, np.ndarray] = field(default_factory=dict)


def _encode(ckpt: Checkpoint) -> bytes:
    index, chunks, offset = [], [], 0
    groups = [("param", ckpt.params), ("adam_m", ckpt.adam.m), ("adam_v", ckpt.adam.v),
              ("norm", ckpt.normalizer)]
    for prefix, tensors in groups:
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            index.append({"name": f"{prefix}/{name}", "shape": list(arr.shape), "offset": offset})
            chunks.append(arr.tobytes())
            offset += arr.nbytes
    header = {
        "version": VERSION,
        "epoch": int(ckpt.epoch),
        "best_val_accuracy": float(ckpt.best_val_accuracy),
        "config": ckpt.config,
        "adam": {"lr": ckpt.adam.lr, "beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2,
                 "eps": ckpt.adam.eps, "t": ckpt.adam.t},
        "tensors": index,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    blob = _encode(ckpt)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 8 + _DIGEST:
        raise CheckpointChecksumError(f"{path}: file too short to be a checkpoint")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointChecksumError(f"{path}: checksum mismatch (truncated or corrupt)")
    if body[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (head_len,) = struct.unpack("<Q", body[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(body[start:start + head_len].decode("utf-8"))
    if header.get("version") != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {header.get('version')}, "
                                     f"expected {VERSION}")
    payload = body[start + head_len:]
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}, "norm": {}}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"]).reshape(shape)
        prefix, name = entry["name"].split("/", 1)
        groups[prefix][name] = arr.astype(np.float64)
    a = header["adam"]
    adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], t=a["t"],
                     m=groups["adam_m"], v=groups["adam_v"])
    return Checkpoint(params=groups["param"], adam=adam, epoch=header["epoch"], config=header["config"],
                      best_val_accuracy=header["best_val_accuracy"], normalizer=groups["norm"])
