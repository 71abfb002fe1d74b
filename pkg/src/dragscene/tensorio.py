"""Binary tensor container used for all persisted arrays.

Layout (little-endian throughout):

    magic    4 bytes  b"DSTN"
    version  u32      1
    dtype    u8       1 = float32
    ndim     u8
    dims     ndim * u32
    payload  row-major float32

Write then read is the identity bit-for-bit.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"DSTN"
VERSION = 1
DTYPE_F32 = 1

_MAX_DIM = 2**32 - 1


def write_tensor(path: str | Path, tensor: np.ndarray) -> None:
    """Write ``tensor`` to ``path``, converting to float32."""
    # note: ascontiguousarray would promote 0-d tensors to 1-d
    arr = np.asarray(tensor, dtype="<f4")
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    if arr.ndim > 255:
        raise FormatError(f"ndim {arr.ndim} exceeds u8 range")
    for d in arr.shape:
        if d > _MAX_DIM:
            raise FormatError(f"dim {d} exceeds u32 range")
    header = MAGIC + struct.pack("<IBB", VERSION, DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.tobytes())


def read_header(path: str | Path) -> dict:
    """Parse and validate just the header; returns shape/dtype/version."""
    with open(path, "rb") as f:
        data = f.read(10 + 4 * 255)
    if len(data) < 10:
        raise FormatError("file too short for header")
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, dtype, ndim = struct.unpack_from("<IBB", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"unknown dtype code {dtype}")
    if len(data) < 10 + 4 * ndim:
        raise FormatError("truncated dims")
    dims = struct.unpack_from(f"<{ndim}I", data, 10)
    return {"shape": tuple(dims), "dtype": "float32", "version": version}


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a tensor written by :func:`write_tensor`.

    Raises :class:`FormatError` on bad magic, wrong version, unknown dtype
    or truncated payload; never returns a partial tensor.
    """
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 10:
        raise FormatError("file too short for header")
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, dtype, ndim = struct.unpack_from("<IBB", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"unknown dtype code {dtype}")
    offset = 10
    if len(data) < offset + 4 * ndim:
        raise FormatError("truncated dims")
    dims = struct.unpack_from(f"<{ndim}I", data, offset)
    offset += 4 * ndim
    count = 1
    for d in dims:
        count *= d
    expected = 4 * count
    if len(data) - offset != expected:
        raise FormatError(
            f"payload length {len(data) - offset} != expected {expected} bytes"
        )
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
    return arr.reshape(dims).copy()
