"""Flat binary checkpoints.

Layout (little endian)::

    magic      8 bytes  b"PFXLAB\\x00\\x01"
    version    u32
    method     u32 length + utf-8 tag
    meta       u32 length + utf-8 JSON (model config and method spec)
    count      u32
    per tensor u32 length + utf-8 name, u32 ndim, u32 dims..., float64 row-major data

Tensors are written in sorted name order so equal contents give equal bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MAGIC = b"PFXLAB\x00\x01"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def dumps(arrays: Dict[str, np.ndarray], method: str, meta: dict) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_str(method)]
    parts.append(_pack_str(json.dumps(meta, sort_keys=True)))
    parts.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8", order="C")
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def loads(buf: bytes) -> Tuple[Dict[str, np.ndarray], str, dict]:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a prefixlab checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    method = r.string()
    meta = json.loads(r.string())
    arrays = {}
    for _ in range(r.u32()):
        name = r.string()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return arrays, method, meta


def save(path, arrays: Dict[str, np.ndarray], method: str, meta: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(dumps(arrays, method, meta))


def load(path) -> Tuple[Dict[str, np.ndarray], str, dict]:
    return loads(Path(path).read_bytes())
