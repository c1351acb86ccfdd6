"""Binary PPM (P6) and PGM (P5) with maxval 255."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{self.path}: byte {offset}: {message}")


def _encode(magic: bytes, arr: np.ndarray) -> bytes:
    h, w = arr.shape[:2]
    return b"%s\n%d %d\n255\n" % (magic, w, h) + np.ascontiguousarray(arr, dtype=np.uint8).tobytes()


def write_ppm(path: str | os.PathLike, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"PPM needs an H x W x 3 uint8 array, got {rgb.dtype} {rgb.shape}")
    Path(path).write_bytes(_encode(b"P6", rgb))


def write_pgm(path: str | os.PathLike, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError(f"PGM needs an H x W uint8 array, got {gray.dtype} {gray.shape}")
    Path(path).write_bytes(_encode(b"P5", gray))


def _parse(buf: bytes, path, magic: bytes, channels: int) -> np.ndarray:
    if buf[:2] != magic:
        raise NetpbmError(path, 0, f"expected magic {magic!r}, found {buf[:2]!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and (buf[pos : pos + 1].isspace() or buf[pos : pos + 1] == b"#"):
            if buf[pos : pos + 1] == b"#":
                end = buf.find(b"\n", pos)
                pos = len(buf) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise NetpbmError(path, pos, "malformed header")
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise NetpbmError(path, pos, "missing whitespace after header")
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise NetpbmError(path, pos, f"unsupported maxval {maxval}")
    n = width * height * channels
    if len(buf) - pos < n:
        raise NetpbmError(path, len(buf), f"short raster: need {n} bytes, have {len(buf) - pos}")
    data = np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos)
    shape = (height, width, channels) if channels > 1 else (height, width)
    return data.reshape(shape).copy()


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    return _parse(Path(path).read_bytes(), path, b"P6", 3)


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    return _parse(Path(path).read_bytes(), path, b"P5", 1)
