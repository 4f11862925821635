"""Flat binary container of named float64 tensors with a JSON header.

Layout: magic ``TNTC``, u32 format version, u64 header length, UTF-8 JSON
header (config plus the tensor name/shape table in storage order), then raw
little-endian float64 buffers concatenated in table order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TNTC"
VERSION = 1


class ContainerError(ValueError):
    """The file is not a valid tensor container."""


def save_tensors(path, arrays: dict[str, np.ndarray], header: dict | None = None) -> None:
    path = Path(path)
    table = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        table.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    doc = {"header": header or {}, "tensors": table}
    payload = json.dumps(doc, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ContainerError(f"{path}: not a tensor container (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    try:
        doc = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"{path}: bad header ({e})") from None
    arrays: dict[str, np.ndarray] = {}
    off = 16 + hlen
    for entry in doc["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if off + nbytes > len(raw):
            raise ContainerError(f"{path}: truncated tensor data for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(raw):
        raise ContainerError(f"{path}: {len(raw) - off} trailing bytes")
    return arrays, doc["header"]
