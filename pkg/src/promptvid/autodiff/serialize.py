"""Versioned binary blob format for single arrays.

Layout (all little-endian)::

    4s   magic  b"PVTN"
    u8   format version (1)
    u8   dtype code (see ``DTYPE_CODES``)
    u16  rank
    u64  extent, repeated ``rank`` times
    ...  row-major payload
"""
from __future__ import annotations

import struct

import numpy as np

from ..errors import DataError, VersionError

MAGIC = b"PVTN"
VERSION = 1
DTYPE_CODES = {1: "<f4", 2: "<f8", 3: "<i8", 4: "|u1", 5: "|b1"}
_CODE_FOR = {np.dtype(v): k for k, v in DTYPE_CODES.items()}


def dumps(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    code = _CODE_FOR.get(np.dtype(dt))
    if code is None:
        raise DataError(f"cannot serialise dtype {arr.dtype}")
    head = MAGIC + struct.pack("<BBH", VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()


def loads(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one blob starting at ``offset``; returns ``(array, next_offset)``."""
    if buf[offset : offset + 4] != MAGIC:
        raise DataError("not a tensor blob (bad magic)")
    version, code, rank = struct.unpack_from("<BBH", buf, offset + 4)
    if version != VERSION:
        raise VersionError(f"tensor blob version {version} unsupported (expected {VERSION})")
    if code not in DTYPE_CODES:
        raise DataError(f"unknown dtype code {code}")
    pos = offset + 8
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    dt = np.dtype(DTYPE_CODES[code])
    n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if pos + n > len(buf):
        raise DataError("truncated tensor blob")
    arr = np.frombuffer(buf, dtype=dt, count=n // dt.itemsize, offset=pos).reshape(shape).copy()
    return arr, pos + n


def save(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(arr))


def load(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return loads(fh.read())[0]
