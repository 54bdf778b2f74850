"""Tensor container files.

Layout: one UTF-8 JSON line holding the ordered manifest
``[{"name", "shape", "dtype"}, ...]`` followed by the little-endian payload
of every entry, concatenated in manifest order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import StructureError

_CODES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def dumps(tensors) -> bytes:
    """Serialize an ordered mapping (or pair list) of name -> float array."""
    items = tensors.items() if hasattr(tensors, "items") else tensors
    manifest, payload = [], []
    for name, arr in items:
        arr = np.asarray(arr)
        if arr.dtype not in _NAMES:
            raise StructureError(f"{name}: unsupported dtype {arr.dtype}")
        code = _NAMES[arr.dtype]
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": code})
        payload.append(np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes())
    head = json.dumps(manifest, separators=(",", ":")).encode("utf-8") + b"\n"
    return head + b"".join(payload)


def loads(blob: bytes) -> dict:
    nl = blob.find(b"\n")
    if nl < 0:
        raise StructureError("missing manifest line")
    manifest = json.loads(blob[:nl].decode("utf-8"))
    out, offset = {}, nl + 1
    for entry in manifest:
        dt = _CODES[entry["dtype"]]
        count = int(np.prod(entry["shape"], dtype=np.int64))
        size = count * dt.itemsize
        if offset + size > len(blob):
            raise StructureError(f"truncated payload at {entry['name']}")
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=offset)
        out[entry["name"]] = arr.reshape(entry["shape"]).astype(dt.newbyteorder("="))
        offset += size
    if offset != len(blob):
        raise StructureError("trailing bytes after payload")
    return out


def save(path, tensors):
    Path(path).write_bytes(dumps(tensors))


def load(path) -> dict:
    return loads(Path(path).read_bytes())
