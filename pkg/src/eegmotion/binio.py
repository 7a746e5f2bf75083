"""Checksummed little-endian float32 array files backing the dataset directories."""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"EMAR"


class FormatError(ValueError):
    """A binary file or manifest does not match its declared layout."""


class ChecksumError(FormatError):
    """A payload failed its CRC32 check."""


def write_array(path, arr) -> None:
    """Write an array as little-endian float32 with a length-and-checksum header.

    Layout: magic, u8 ndim, u32 per dimension, u64 payload length,
    u32 CRC32 of the payload, payload.
    """
    a = np.ascontiguousarray(arr, dtype="<f4")
    if a.ndim < 1:
        a = a.reshape(1)
    payload = a.tobytes()
    header = MAGIC + struct.pack("<B", a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    header += struct.pack("<QI", len(payload), zlib.crc32(payload))
    Path(path).write_bytes(header + payload)


def read_array(path, expect_shape=None) -> np.ndarray:
    """Read an array file, verifying magic, declared length, and checksum.

    ``expect_shape``, when given (e.g. from a manifest), must match the shape
    stored in the file header.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 5 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not an array file (bad magic)")
    ndim = raw[4]
    off = 5
    if len(raw) < off + 4 * ndim + 12:
        raise FormatError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    length, crc = struct.unpack_from("<QI", raw, off)
    off += 12
    payload = raw[off:]
    if len(payload) != length:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, header declares {length}"
        )
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    n = int(np.prod(shape))
    if length != 4 * n:
        raise FormatError(f"{path}: payload length {length} != 4*prod{tuple(shape)}")
    if expect_shape is not None and tuple(shape) != tuple(expect_shape):
        raise FormatError(
            f"{path}: stored shape {tuple(shape)} does not match manifest "
            f"shape {tuple(expect_shape)}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
