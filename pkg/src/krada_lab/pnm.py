"""Binary PPM (P6) and PGM (P5) reading and writing, maxval 255 only."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError

_WS = b" \t\r\n"


def _encode(magic: bytes, pixels: np.ndarray) -> bytes:
    h, w = pixels.shape[:2]
    return magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def _parse_header(buf: bytes, path) -> tuple[bytes, int, int, int]:
    magic = buf[:2]
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos] in _WS:
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: malformed header")
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or buf[pos] not in _WS:
        raise FormatError(f"{path}: malformed header")
    w, h, maxval = fields
    if maxval != 255 or w <= 0 or h <= 0:
        raise FormatError(f"{path}: unsupported size {w}x{h} or maxval {maxval}")
    return magic, w, h, pos + 1


def _read(path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    got, w, h, pos = _parse_header(buf, path)
    if got != magic:
        raise FormatError(f"{path}: expected {magic!r} file, found {got!r}")
    n = w * h * channels
    if len(buf) - pos < n:
        raise FormatError(f"{path}: truncated pixel data")
    data = np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos)
    return data.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an ``H x W x 3`` uint8 array."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected H x W x 3, got {rgb.shape}")
    Path(path).write_bytes(_encode(b"P6", rgb))


def read_ppm(path) -> np.ndarray:
    return _read(path, b"P6", 3)


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"expected H x W, got {gray.shape}")
    if gray.min(initial=0) < 0 or gray.max(initial=0) > 255:
        raise ValueError("gray values must lie in 0..255")
    Path(path).write_bytes(_encode(b"P5", gray))


def read_pgm(path) -> np.ndarray:
    return _read(path, b"P5", 1)
