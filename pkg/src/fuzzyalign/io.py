"""Binary embedding files and atomic writes.

Layout (little-endian)::

    b"EMBF"              magic
    u32  version         (1)
    u32  rows
    u32  dim
    u8   has_ids         (0 or 1)
    u32  ids[rows]       only when has_ids == 1
    f32  data[rows*dim]  row-major
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import CorruptFile

MAGIC = b"EMBF"
VERSION = 1
_HEADER = struct.Struct("<4sIIIB")
_U32_MAX = 2**32 - 1


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_embeddings(data, ids=None) -> bytes:
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise ValueError(f"embeddings must be 2-D, got shape {arr.shape}")
    rows, dim = arr.shape
    if rows > _U32_MAX or dim > _U32_MAX:
        raise ValueError("row count and dimension must fit in u32")
    parts = [_HEADER.pack(MAGIC, VERSION, rows, dim, 0 if ids is None else 1)]
    if ids is not None:
        ids = np.asarray(ids)
        if ids.shape != (rows,):
            raise ValueError(f"ids shape {ids.shape} does not match {rows} rows")
        if ids.size and (ids.min() < 0 or ids.max() > _U32_MAX):
            raise ValueError("ids must fit in u32")
        parts.append(ids.astype("<u4").tobytes())
    parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_embeddings(buf: bytes):
    """Return ``(float32 array rows x dim, uint32 ids or None)``."""
    if len(buf) < _HEADER.size:
        raise CorruptFile(f"file too short for header ({len(buf)} bytes)")
    magic, version, rows, dim, has_ids = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CorruptFile(f"bad magic {magic!r}")
    if version != VERSION:
        raise CorruptFile(f"unsupported version {version}")
    if has_ids not in (0, 1):
        raise CorruptFile(f"bad ids flag {has_ids}")
    id_bytes = 4 * rows * has_ids
    expected = _HEADER.size + id_bytes + 4 * rows * dim
    if len(buf) != expected:
        raise CorruptFile(
            f"payload size mismatch: header says {rows}x{dim} (expect {expected} bytes), got {len(buf)}"
        )
    off = _HEADER.size
    ids = None
    if has_ids:
        ids = np.frombuffer(buf, dtype="<u4", count=rows, offset=off).astype(np.uint32)
        off += id_bytes
    data = np.frombuffer(buf, dtype="<f4", count=rows * dim, offset=off).astype(np.float32)
    return data.reshape(rows, dim), ids


def write_embeddings(path, data, ids=None):
    atomic_write_bytes(path, encode_embeddings(data, ids))


def read_embeddings(path):
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise CorruptFile(f"{path}: no such file") from exc
    try:
        return decode_embeddings(buf)
    except CorruptFile as exc:
        raise CorruptFile(f"{path}: {exc}") from None
