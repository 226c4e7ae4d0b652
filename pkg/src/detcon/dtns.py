"""DTNS binary tensor files.

Layout: ``b"DTNS"``, u8 version (1), u8 dtype code, u8 ndim, ndim little-endian
u64 extents, then the little-endian row-major payload.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"DTNS"
VERSION = 1
_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i4")}
_BY_DTYPE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.int32): 3}


class DTNSError(ValueError):
    pass


def encode(array: np.ndarray) -> bytes:
    a = np.asarray(array)
    if a.dtype == np.bool_:
        a = a.astype(np.int32)
    code = _BY_DTYPE.get(a.dtype)
    if code is None:
        raise DTNSError(f"dtype {a.dtype} is not storable (f32, f64, i32 only)")
    if a.ndim > 255:
        raise DTNSError("too many dimensions")
    header = MAGIC + struct.pack("<BBB", VERSION, code, a.ndim)
    header += struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + np.ascontiguousarray(a, dtype=_CODES[code]).tobytes()


def decode(buf: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise DTNSError(f"{name}: not a DTNS file")
    version, code, ndim = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise DTNSError(f"{name}: unsupported DTNS version {version}")
    if code not in _CODES:
        raise DTNSError(f"{name}: unknown dtype code {code}")
    off = 7 + 8 * ndim
    if len(buf) < off:
        raise DTNSError(f"{name}: truncated header")
    shape = struct.unpack_from(f"<{ndim}Q", buf, 7)
    dtype = _CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - off != expected:
        raise DTNSError(f"{name}: payload has {len(buf) - off} bytes, expected {expected}")
    return np.frombuffer(buf, dtype=dtype, offset=off).reshape(shape).astype(dtype.newbyteorder("="))


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, array: np.ndarray) -> None:
    atomic_write_bytes(path, encode(array))


def load(path) -> np.ndarray:
    path = Path(path)
    return decode(path.read_bytes(), name=str(path))
