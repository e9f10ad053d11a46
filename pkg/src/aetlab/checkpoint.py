"""Flat binary archive of named float64 tensors plus a JSON metadata record.

Layout (all integers little-endian)::

    b"AETCKPT1"
    u32 metadata length, metadata as UTF-8 JSON (sorted keys)
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 ndim, ndim x u32 dims,
                prod(dims) x f64 raw values
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"AETCKPT1"


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    parts = [MAGIC]
    blob = json.dumps(meta, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(blob)) + blob)
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic at offset 0)")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{path}: truncated checkpoint at offset {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    (mlen,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(take(mlen))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt metadata at offset 12") from exc
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(float)
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes at offset {pos}")
    return tensors, meta
