"""Checkpoint container.

Layout (little-endian)::

    b"ADFA"            magic
    u32                format version
    u32                header length in bytes
    header             UTF-8 JSON: {"meta": {...}, "tensors": [{name, shape, offset, nbytes}]}
    payload            concatenated row-major float32 tensors, offsets relative to payload start

The header is serialized with sorted keys and no timestamps, so identical
inputs give byte-identical files.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError

MAGIC = b"ADFA"
VERSION = 1


def write_container(path: str | Path, tensors: dict, meta: dict) -> str:
    """Write named tensors plus JSON metadata; returns the file's sha256."""
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name].detach().cpu().contiguous().numpy(), dtype="<f4", order="C")
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    data = MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(blobs)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_container(path: str | Path) -> tuple[dict, dict, str]:
    """Inverse of :func:`write_container`: (tensors, meta, sha256)."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ConfigError(f"{path} is not an ADFA checkpoint")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12 : 12 + hlen].decode())
    base = 12 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=e["nbytes"] // 4, offset=start)
        tensors[e["name"]] = torch.from_numpy(arr.astype(np.float32).reshape(e["shape"]))
    return tensors, header["meta"], hashlib.sha256(data).hexdigest()
