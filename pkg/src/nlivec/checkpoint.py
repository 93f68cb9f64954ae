"""Single-file checkpoints: versioned header, JSON metadata, raw float64 data.

Layout::

    b"NLIVEC-CKPT\\n"
    uint32 little-endian format version
    uint64 little-endian header length H
    H bytes of UTF-8 JSON: {"config": ..., "meta": ..., "tensors": [...]}
    concatenated little-endian float64 payloads, in header order

Each tensor entry records ``name``, ``shape``, ``offset`` and ``count``.
Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"NLIVEC-CKPT\n"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, config: dict, tensors: dict, meta: dict | None = None):
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        if not isinstance(arr, np.ndarray):
            arr = arr.data  # Tensor
        arr = np.array(arr, dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size
    header = json.dumps(
        {"config": config, "meta": meta or {}, "tensors": entries}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = np.frombuffer(fh.read(), dtype="<f8")
    tensors = {}
    for e in header["tensors"]:
        chunk = payload[e["offset"] : e["offset"] + e["count"]]
        if chunk.size != e["count"]:
            raise CheckpointError(f"{path}: truncated data for {e['name']}")
        tensors[e["name"]] = chunk.astype(np.float64).reshape(e["shape"])
    return Checkpoint(header["config"], tensors, header.get("meta", {}))
