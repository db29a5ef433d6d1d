"""Binary netpbm I/O: P6 (RGB) and P5 (grayscale), maxval 255."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import FormatError

_WHITESPACE = b" \t\n\r\v\f"


def _header(buf: bytes, magic: bytes, path) -> tuple[int, int, int, int]:
    """Parse ``magic width height maxval`` and return them with the raster offset."""
    if buf[:2] != magic:
        raise FormatError(f"{path}: expected magic {magic.decode()}, found {buf[:2]!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(buf):
            raise FormatError(f"{path}: truncated header")
        ch = buf[pos:pos + 1]
        if ch in _WHITESPACE:
            pos += 1
            continue
        if ch == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise FormatError(f"{path}: unterminated header comment")
            pos = end + 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: non-numeric header field at byte {start}")
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or buf[pos:pos + 1] not in _WHITESPACE:
        raise FormatError(f"{path}: missing whitespace after maxval")
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise FormatError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    return width, height, maxval, pos + 1


def _read(path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    width, height, _, offset = _header(buf, magic, path)
    need = width * height * channels
    raster = buf[offset:]
    if len(raster) != need:
        raise FormatError(f"{path}: raster has {len(raster)} bytes, expected {need}")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(height, width, channels) if channels > 1 else arr.reshape(height, width)


def _write(path, magic: bytes, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise FormatError(f"netpbm rasters must be uint8, got {arr.dtype}")
    height, width = arr.shape[:2]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"%s\n%d %d\n255\n" % (magic, width, height))
        fh.write(np.ascontiguousarray(arr).tobytes())
    os.replace(tmp, path)


def read_ppm(path) -> np.ndarray:
    """Return an ``(H, W, 3)`` uint8 array."""
    return _read(path, b"P6", 3)


def write_ppm(path, rgb: np.ndarray) -> None:
    if np.ndim(rgb) != 3 or np.shape(rgb)[2] != 3:
        raise FormatError(f"PPM raster must be (H, W, 3), got {np.shape(rgb)}")
    _write(path, b"P6", rgb)


def read_pgm(path) -> np.ndarray:
    """Return an ``(H, W)`` uint8 array."""
    return _read(path, b"P5", 1)


def write_pgm(path, gray: np.ndarray) -> None:
    if np.ndim(gray) != 2:
        raise FormatError(f"PGM raster must be (H, W), got {np.shape(gray)}")
    _write(path, b"P5", gray)
