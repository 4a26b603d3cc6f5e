"""Flat binary checkpoints.

Layout: magic ``VDCK``, u16 format version, u32 header size, a UTF-8 JSON
header (kind, metadata, tensor table), then the raw little-endian tensor
bytes in table order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"VDCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def save_checkpoint(path, kind: str, tensors: dict[str, torch.Tensor], meta: dict) -> None:
    table, blobs, offset = [], [], 0
    for name, tensor in tensors.items():
        array = tensor.detach().cpu().numpy()
        array = array.astype(array.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(array).tobytes()
        table.append({"name": name, "dtype": array.dtype.str, "shape": list(array.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "meta": meta, "tensors": table}, sort_keys=True).encode()
    Path(path).write_bytes(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(blobs))


def load_checkpoint(path, kind: str | None = None) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: not a checkpoint")
    magic, version, size = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint format {version}, expected {FORMAT_VERSION}")
    header = json.loads(data[_PREFIX.size:_PREFIX.size + size])
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"{path}: holds a {header['kind']!r} model, expected {kind!r}")
    body = data[_PREFIX.size + size:]
    tensors = {}
    for entry in header["tensors"]:
        chunk = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {entry['name']}")
        array = np.frombuffer(chunk, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(array.copy())
    return tensors, header["meta"]
