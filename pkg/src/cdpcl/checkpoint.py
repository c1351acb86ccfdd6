"""Binary checkpoint codec for named float64 arrays.

Layout (little-endian)::

    b"CDPT"  u32 version  u32 count
    repeated count times:
        u32 name_len  name (UTF-8)  u32 rank  u32 dims[rank]  f64 values[prod(dims)]
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CDPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    return b"".join(parts)


def decode(buf: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    def need(off: int, n: int) -> None:
        if off + n > len(buf):
            raise CheckpointError(f"{source}: truncated at byte {off} (need {n} more bytes)")

    need(0, 12)
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {buf[:4]!r} at byte 0")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(off, 4)
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(off, nlen + 4)
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(off, 4 * rank)
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        need(off, 8 * n)
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(dims)
        off += 8 * n
    if off != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - off} trailing bytes at byte {off}")
    return out


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(tensors))
    tmp.replace(path)


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    path = Path(path)
    return decode(path.read_bytes(), str(path))
