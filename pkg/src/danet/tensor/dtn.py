"""DTN1: a minimal binary container for one 4-D float32 tensor.

Layout: 4-byte magic "DTN1", four little-endian uint64 extents (N, C, H, W),
then the row-major little-endian float32 payload.  Used for dataset caches
and as the block format inside checkpoints.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"DTN1"
_HEADER = struct.Struct("<4Q")


class DtnFormatError(ValueError):
    """Raised when a stream does not parse as DTN1."""


def write_array(dst: BinaryIO | str | Path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim != 4:
        raise DtnFormatError(f"DTN1 stores 4-D tensors, got shape {arr.shape}")
    if hasattr(dst, "write"):
        _write(dst, arr)
    else:
        with open(dst, "wb") as f:
            _write(f, arr)


def _write(f: BinaryIO, arr: np.ndarray) -> None:
    f.write(MAGIC)
    f.write(_HEADER.pack(*arr.shape))
    f.write(arr.tobytes())


def read_array(src: BinaryIO | str | Path) -> np.ndarray:
    if hasattr(src, "read"):
        return _read(src)
    with open(src, "rb") as f:
        return _read(f)


def _read(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != MAGIC:
        raise DtnFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    header = f.read(_HEADER.size)
    if len(header) != _HEADER.size:
        raise DtnFormatError("truncated header")
    shape = _HEADER.unpack(header)
    count = int(np.prod(shape))
    payload = f.read(count * 4)
    if len(payload) != count * 4:
        raise DtnFormatError(
            f"truncated payload: expected {count * 4} bytes for shape {shape}, got {len(payload)}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
