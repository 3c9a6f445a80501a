"""
Versioned binary tensor container.

Layout (little-endian)::

    magic      8 bytes  b"PCGCKPT\\0"
    version    u32
    count      u32      number of tensors
    meta_len   u32      followed by meta_len bytes of UTF-8 JSON metadata
    per tensor:
        name_len u32, name (UTF-8), rank u32, dims u32 * rank,
        payload  float32 * prod(dims)
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from ..errors import CheckpointError

MAGIC = b"PCGCKPT\0"
VERSION = 1


def encode(tensors: dict, metadata: dict | None = None) -> bytes:
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<III", VERSION, len(tensors), len(meta)), meta]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def decode(blob: bytes):
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    try:
        version, count, meta_len = struct.unpack_from("<III", blob, 8)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 20
        metadata = json.loads(blob[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            dims = struct.unpack_from(f"<{rank}I", blob, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=pos)
            tensors[name] = arr.astype(np.float32).reshape(dims)
            pos += 4 * size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes in checkpoint")
    return tensors, metadata


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def save(path, tensors: dict, metadata: dict | None = None) -> None:
    atomic_write_bytes(path, encode(tensors, metadata))


def load(path):
    return decode(Path(path).read_bytes())
