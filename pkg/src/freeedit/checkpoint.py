"""Binary tensor checkpoint format.

Layout (little-endian)::

    b"FECKPT01"  u32 count
    count x { u32 name_len, name (UTF-8), u8 rank, u32 dims[rank], f32 data[prod(dims)] }
    optional trailer: b"FETRAIL1"  u32 json_len  JSON (UTF-8)

The trailer carries training metadata (config, iteration, PRNG state). A
file without a trailer is a plain tensor archive.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from typing import Any

import numpy as np

MAGIC = b"FECKPT01"
TRAILER_MAGIC = b"FETRAIL1"


class CheckpointFormatError(ValueError):
    pass


def encode_tensors(tensors: dict[str, np.ndarray], trailer: dict[str, Any] | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    if trailer is not None:
        blob = json.dumps(trailer, sort_keys=True).encode("utf-8")
        parts += [TRAILER_MAGIC, struct.pack("<I", len(blob)), blob]
    return b"".join(parts)


def decode_tensors(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any] | None]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointFormatError(f"truncated checkpoint reading {what} at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(8, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic: not a FECKPT01 checkpoint")
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * n, f"data of {name}"), dtype="<f4").reshape(dims)
        tensors[name] = data.astype(np.float32)
    trailer = None
    if pos < len(buf):
        if take(8, "trailer magic") != TRAILER_MAGIC:
            raise CheckpointFormatError(f"unexpected bytes after tensors at byte {pos - 8}")
        (tlen,) = struct.unpack("<I", take(4, "trailer length"))
        trailer = json.loads(take(tlen, "trailer").decode("utf-8"))
        if pos != len(buf):
            raise CheckpointFormatError(f"trailing garbage at byte {pos}")
    return tensors, trailer


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write to a temporary file in the same directory, then rename over ``path``."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".ckpt")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensors(path, tensors: dict[str, np.ndarray], trailer: dict[str, Any] | None = None) -> None:
    atomic_write(path, encode_tensors(tensors, trailer))


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict[str, Any] | None]:
    with open(path, "rb") as fh:
        return decode_tensors(fh.read())
