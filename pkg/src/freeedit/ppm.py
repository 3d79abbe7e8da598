"""Binary P6 (maxval 255) image reading and writing."""

from __future__ import annotations

import os

import numpy as np

from .checkpoint import atomic_write


class PPMFormatError(ValueError):
    def __init__(self, message: str, offset: int, path: str | os.PathLike | None = None):
        self.offset = offset
        self.path = path
        where = f"{path}: " if path is not None else ""
        super().__init__(f"{where}byte {offset}: {message}")


def quantize(img) -> np.ndarray:
    """[0, 1] floats -> uint8 with round-half-up."""
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def to_float(img8: np.ndarray) -> np.ndarray:
    return (img8.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def encode_ppm(img) -> bytes:
    img8 = img if np.asarray(img).dtype == np.uint8 else quantize(img)
    img8 = np.ascontiguousarray(img8)
    if img8.ndim != 3 or img8.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {img8.shape}")
    h, w = img8.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img8.tobytes()


def decode_ppm(buf: bytes, path=None) -> np.ndarray:
    """Parse a P6 file into an (H, W, 3) uint8 array."""
    pos = 0

    def skip_space():
        nonlocal pos
        while pos < len(buf):
            c = buf[pos:pos + 1]
            if c == b"#":
                while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break

    def integer(what: str) -> int:
        nonlocal pos
        skip_space()
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise PPMFormatError(f"expected {what}", start, path)
        return int(buf[start:pos])

    if buf[:2] != b"P6":
        raise PPMFormatError("missing P6 magic", 0, path)
    pos = 2
    width = integer("width")
    height = integer("height")
    skip_space()
    maxval_at = pos
    maxval = integer("maxval")
    if maxval != 255:
        raise PPMFormatError(f"unsupported maxval {maxval}", maxval_at, path)
    if width <= 0 or height <= 0:
        raise PPMFormatError(f"bad dimensions {width}x{height}", maxval_at, path)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PPMFormatError("expected whitespace after header", pos, path)
    pos += 1
    need = width * height * 3
    have = len(buf) - pos
    if have < need:
        raise PPMFormatError(f"pixel data truncated: expected {need} bytes, found {have}", pos + have, path)
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(height, width, 3).copy()


def write_ppm(path, img) -> None:
    atomic_write(path, encode_ppm(img))


def read_ppm(path) -> np.ndarray:
    """Read a P6 file as float32 values in [0, 1]."""
    with open(path, "rb") as f:
        return to_float(decode_ppm(f.read(), path))
