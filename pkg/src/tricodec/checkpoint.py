"""Binary container for named tensors.

Layout, all little-endian:

    magic  4 bytes  b"TCKP"
    u32    format version (currently 1)
    u32    tensor count
    then per tensor, in insertion order:
    u16    name byte length, followed by that many UTF-8 bytes
    u8     dtype code (see _DTYPES)
    u8     rank
    u64[rank]  dims
    raw    payload, C order, little-endian

Writes are atomic (temp file in the same directory, then rename), so a
reader never observes a half-written checkpoint.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

__all__ = ["CheckpointError", "save_tensors", "load_tensors", "MAGIC", "VERSION"]

MAGIC = b"TCKP"
VERSION = 1

_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("<u8"),
    4: np.dtype("<u2"),
    5: np.dtype("<u4"),
    6: np.dtype("u1"),
}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(Exception):
    pass


def save_tensors(path, tensors: dict) -> None:
    """Write ``{name: ndarray}`` to ``path`` atomically, preserving order."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        shape = arr.shape  # before ascontiguousarray, which promotes 0-d to 1-d
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise CheckpointError(f"tensor '{name}': unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise CheckpointError(f"tensor name too long ({len(nb)} bytes)")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", _CODES[dt], len(shape)))
        parts.append(struct.pack(f"<{len(shape)}Q", *shape))
        parts.append(arr.astype(dt, copy=False).tobytes(order="C"))

    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(b"".join(parts))
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_tensors(path) -> dict:
    """Read a container written by ``save_tensors``; returns ``{name: ndarray}``."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise CheckpointError(f"{path}: too short for a checkpoint header")
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}, expected {VERSION}")

    out = {}
    pos = 12
    for i in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + nlen].decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<BB", raw, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}Q", raw, pos)
            pos += 8 * rank
        except struct.error:
            raise CheckpointError(f"{path}: truncated header in tensor record {i}") from None
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: tensor '{name}' has unknown dtype code {code}")
        dt = _DTYPES[code]
        nbytes = dt.itemsize * int(np.prod(dims, dtype=np.int64)) if rank else dt.itemsize
        if pos + nbytes > len(raw):
            raise CheckpointError(f"{path}: tensor '{name}' payload truncated")
        out[name] = np.frombuffer(raw[pos : pos + nbytes], dtype=dt).reshape(dims).copy()
        pos += nbytes
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes after the last tensor")
    return out
