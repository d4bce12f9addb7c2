"""IVCS named-tensor container.

Layout (all integers little-endian)::

    b"IVCS" | u16 version | u16 flags | u32 record count
    per record: u16 name length | UTF-8 name | u8 dtype | u8 ndim | ndim x u64 dims | payload
    u64 FNV-1a over every preceding byte

dtype 0 is f32 (row-major), dtype 1 is raw u8 (used for text metadata).
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"IVCS"
VERSION = 1
F32 = 0
U8 = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1


class BundleError(ValueError):
    pass


def fnv1a64(data: bytes, h: int = _FNV_OFFSET) -> int:
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK
    return h


def encode(records: Mapping[str, np.ndarray | bytes | str], flags: int = 0) -> bytes:
    parts = [MAGIC, struct.pack("<HHI", VERSION, flags, len(records))]
    for name, value in records.items():
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise BundleError(f"record name too long: {name[:40]}...")
        if isinstance(value, str):
            value = value.encode("utf-8")
        if isinstance(value, (bytes, bytearray)):
            dtype, dims, payload = U8, (len(value),), bytes(value)
        else:
            arr = np.asarray(value)
            if arr.dtype != np.float32:
                if not np.issubdtype(arr.dtype, np.floating) and not np.issubdtype(arr.dtype, np.integer):
                    raise BundleError(f"{name}: unsupported dtype {arr.dtype}")
                arr = arr.astype(np.float32)
            dtype, dims = F32, arr.shape
            payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        if len(dims) > 255:
            raise BundleError(f"{name}: too many dims")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", dtype, len(dims)))
        parts.append(struct.pack(f"<{len(dims)}Q", *dims))
        parts.append(payload)
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


def decode(blob: bytes) -> dict[str, np.ndarray | bytes]:
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise BundleError("not an IVCS bundle (bad magic)")
    body, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if fnv1a64(body) != stored:
        raise BundleError("checksum mismatch")
    version, _flags, count = struct.unpack_from("<HHI", body, 4)
    if version != VERSION:
        raise BundleError(f"unsupported version {version}")
    pos = 12
    out: dict[str, np.ndarray | bytes] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            dtype, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            dims = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            if name in out:
                raise BundleError(f"duplicate record name {name!r}")
            if dtype == F32:
                size = 4 * n
                if pos + size > len(body):
                    raise BundleError(f"{name}: payload runs past end of file")
                out[name] = np.frombuffer(body, dtype="<f4", count=n, offset=pos).astype(np.float32).reshape(dims)
            elif dtype == U8:
                size = n
                if pos + size > len(body):
                    raise BundleError(f"{name}: payload runs past end of file")
                out[name] = bytes(body[pos:pos + size])
            else:
                raise BundleError(f"{name}: unknown dtype code {dtype}")
            pos += size
    except struct.error as exc:
        raise BundleError(f"truncated bundle: {exc}") from None
    if pos != len(body):
        raise BundleError(f"{len(body) - pos} trailing bytes after last record")
    return out


def write(path: str | Path, records: Mapping[str, np.ndarray | bytes | str]) -> int:
    blob = encode(records)
    Path(path).write_bytes(blob)
    return len(blob)


def read(path: str | Path) -> dict[str, np.ndarray | bytes]:
    return decode(Path(path).read_bytes())


def content_hash(records: Mapping[str, np.ndarray | bytes | str]) -> str:
    """Hex FNV-1a of the encoded container (the trailing checksum)."""
    (h,) = struct.unpack("<Q", encode(records)[-8:])
    return f"{h:016x}"
