"""TNSR1 raw tensor files: magic, u32 rank, u32 extents, float32 payload (little-endian)."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TNSR1"


class TensorFormatError(ValueError):
    pass


def dumps(array: np.ndarray) -> bytes:
    a = np.ascontiguousarray(array, dtype="<f4")
    head = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def loads(buf: bytes) -> np.ndarray:
    if buf[:5] != MAGIC:
        raise TensorFormatError("bad magic")
    if len(buf) < 9:
        raise TensorFormatError("truncated header")
    (rank,) = struct.unpack_from("<I", buf, 5)
    off = 9 + 4 * rank
    if len(buf) < off:
        raise TensorFormatError("truncated header")
    shape = struct.unpack_from(f"<{rank}I", buf, 9)
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) != off + 4 * count:
        raise TensorFormatError(f"payload size {len(buf) - off} does not match shape {shape}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)


def save(path, array: np.ndarray) -> None:
    Path(path).write_bytes(dumps(array))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())
