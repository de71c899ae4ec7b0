"""On-disk formats: VTNS tensors and PGM frame dumps.

VTNS layout, all little-endian:

    magic 'VTNS' | u8 version=1 | u8 dtype (0=f32, 1=f64) | u8 ndim |
    5 reserved zero bytes | ndim x u64 extents | payload, row-major

Every tensor dump and fixture in the project uses this format bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"VTNS"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_vtns(path, array):
    """Write a float32/float64 ndarray as a VTNS file."""
    arr = np.asarray(array)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise ValueError(f"VTNS stores f32/f64 only, got {arr.dtype}")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    header = MAGIC + struct.pack("<BBB5x", VERSION, _DTYPE_CODES[dt], arr.ndim)
    extents = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=dt).tobytes()
    Path(path).write_bytes(header + extents + payload)


def read_vtns(path):
    """Read a VTNS file back into an ndarray (native byte order)."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a VTNS file")
    version, code, ndim = struct.unpack_from("<BBB", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported VTNS version {version}")
    if code not in _CODE_DTYPES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    offset = 12
    if len(raw) < offset + 8 * ndim:
        raise ValueError(f"{path}: truncated VTNS header")
    shape = struct.unpack_from(f"<{ndim}Q", raw, offset)
    offset += 8 * ndim
    dt = _CODE_DTYPES[code]
    expected = int(np.prod(shape)) * dt.itemsize
    if len(raw) != offset + expected:
        raise ValueError(f"{path}: payload is {len(raw) - offset} bytes, expected {expected}")
    arr = np.frombuffer(raw, dtype=dt, count=int(np.prod(shape)), offset=offset)
    return arr.reshape(shape).astype(dt.newbyteorder("="), copy=True)


def write_pgm(path, frame):
    """Dump one grayscale frame (values in [-1, 1]) as binary PGM (P5)."""
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"PGM frames are 2-d, got shape {arr.shape}")
    pixels = np.clip((arr + 1.0) * 127.5, 0, 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())
