"""TNSR binary tensor interchange and the TNSC checkpoint container.

TNSR layout (all integers little-endian):
    magic  b"TNSR"
    u32    version (1)
    u32    dtype   (0 = float32, 1 = float64)
    u32    ndim
    u64[ndim] extents
    payload: row-major little-endian scalars

TNSC layout: magic b"TNSC", u32 version (1), u32 entry count, then per entry
a u32 name length, UTF-8 name, u64 blob length; entry blobs (each a complete
TNSR image) follow in the same order.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TNSR"
CONTAINER_MAGIC = b"TNSC"
VERSION = 1

_DTYPE_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    """Malformed TNSR/TNSC bytes."""


def dump_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, order="C")  # ascontiguousarray would promote 0-d to 1-d
    if arr.dtype not in _DTYPE_CODE:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    head = MAGIC + struct.pack("<III", VERSION, _DTYPE_CODE[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
    return head + payload


def load_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}")
    version, code, ndim = struct.unpack_from("<III", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if code not in _CODE_DTYPE:
        raise FormatError(f"unknown dtype code {code}")
    off = 16
    shape = struct.unpack_from(f"<{ndim}Q", buf, off) if ndim else ()
    off += 8 * ndim
    dt = _CODE_DTYPE[code]
    n = int(np.prod(shape, dtype=np.int64)) if shape else 1
    if len(buf) - off != n * dt.itemsize:
        raise FormatError(f"payload size {len(buf) - off} != expected {n * dt.itemsize}")
    arr = np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(shape)
    return arr.astype(dt.newbyteorder("="), order="C")


def save(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(dump_bytes(arr))


def load(path) -> np.ndarray:
    return load_bytes(Path(path).read_bytes())


def save_container(path, entries: dict[str, np.ndarray]) -> None:
    """Write named arrays as a TNSC file; iteration order is preserved."""
    blobs = [(name, dump_bytes(arr)) for name, arr in entries.items()]
    out = io.BytesIO()
    out.write(CONTAINER_MAGIC)
    out.write(struct.pack("<II", VERSION, len(blobs)))
    for name, blob in blobs:
        nb = name.encode("utf-8")
        out.write(struct.pack("<I", len(nb)))
        out.write(nb)
        out.write(struct.pack("<Q", len(blob)))
    for _, blob in blobs:
        out.write(blob)
    Path(path).write_bytes(out.getvalue())


def load_container(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CONTAINER_MAGIC:
        raise FormatError(f"bad container magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    off = 12
    index = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (blen,) = struct.unpack_from("<Q", buf, off)
        off += 8
        index.append((name, blen))
    out = {}
    for name, blen in index:
        out[name] = load_bytes(buf[off:off + blen])
        off += blen
    if off != len(buf):
        raise FormatError("trailing bytes after last container entry")
    return out
