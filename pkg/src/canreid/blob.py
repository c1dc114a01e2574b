"""Binary "CANT" tensor blobs.

Layout: ``b"CANT"``, version u8, element code u8 (0 = f64, 1 = f32), ndim u8,
``ndim`` little-endian u32 dims, then little-endian row-major elements. No padding.
"""
from __future__ import annotations

import io
import os
import struct

import numpy as np

MAGIC = b"CANT"
VERSION = 1
_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_TO_CODE = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


class BlobError(ValueError):
    pass


def encode_blob(array) -> bytes:
    arr = np.asarray(array)
    if arr.dtype not in _TO_CODE:
        arr = arr.astype(np.float64)
    code = _TO_CODE[arr.dtype]
    if arr.ndim > 255:
        raise BlobError("too many dimensions")
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()


def decode_blob(buf: bytes) -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise BlobError("not a CANT blob (bad magic)")
    version, code, ndim = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise BlobError(f"unsupported blob version {version}")
    if code not in _CODES:
        raise BlobError(f"unknown element type code {code}")
    offset = 7 + 4 * ndim
    if len(buf) < offset:
        raise BlobError("truncated header")
    shape = struct.unpack_from(f"<{ndim}I", buf, 7)
    dtype = _CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - offset != expected:
        raise BlobError(f"payload is {len(buf) - offset} bytes, expected {expected}")
    arr = np.frombuffer(buf, dtype=dtype, offset=offset).reshape(shape)
    return arr.astype(dtype.newbyteorder("="))


def write_blob(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_blob(array))


def read_blob(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_blob(fh.read())


def roundtrip(array) -> np.ndarray:
    return decode_blob(io.BytesIO(encode_blob(array)).getvalue())
