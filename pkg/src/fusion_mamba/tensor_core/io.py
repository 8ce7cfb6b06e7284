"""TNS1 binary tensor files.

Layout: the magic ``b"TNS1"``, four little-endian uint32 dims (B, C, H, W),
then B*C*H*W little-endian float32 values in row-major order.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from ..errors import DimensionError

MAGIC = b"TNS1"
_HEADER = struct.Struct("<4s4I")


def to_rank4(shape) -> tuple:
    shape = tuple(int(s) for s in shape)
    if len(shape) > 4:
        raise DimensionError(f"TNS1 stores at most 4 dims, got {shape}")
    return (1,) * (4 - len(shape)) + shape


def write_tns(path, array) -> None:
    arr = np.asarray(array)
    dims = to_rank4(arr.shape)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, *dims))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tns(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{os.fspath(path)}: truncated TNS1 header")
    magic, *dims = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{os.fspath(path)}: bad magic {magic!r}")
    count = int(np.prod(dims))
    body = raw[_HEADER.size:]
    if len(body) != 4 * count:
        raise ValueError(f"{os.fspath(path)}: expected {count} floats, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(dims)
