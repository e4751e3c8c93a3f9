"""Checksummed binary container shared by snapshot, mode-basis and ROM-bundle files.

Layout::

    magic (8 bytes) | header length (uint64 LE) | header (UTF-8 JSON, sorted keys)
    | array payloads (little-endian, in header order) | sha256 of everything before (32 bytes)

The header lists every array with its name, dtype, shape and memory order;
matrices are written column-major (Fortran order).
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

_DTYPES = {"f8": "<f8", "i8": "<i8"}


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def encode(magic: bytes, meta: Mapping, arrays: Mapping[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    specs, payload = [], []
    for name, arr in arrays.items():
        a = np.asarray(arr)
        code = "i8" if np.issubdtype(a.dtype, np.integer) else "f8"
        a = a.astype(_DTYPES[code], copy=False)
        specs.append({"name": name, "dtype": code, "shape": list(a.shape)})
        payload.append(np.asfortranarray(a).tobytes(order="F"))
    header = _canonical_json({"meta": meta, "arrays": specs})
    body = magic + struct.pack("<Q", len(header)) + header + b"".join(payload)
    return body + hashlib.sha256(body).digest()


def decode(data: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < 48 or data[:8] != magic:
        raise FormatError(f"bad magic: expected {magic!r}")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError("checksum mismatch")
    (hlen,) = struct.unpack("<Q", body[8:16])
    try:
        header = json.loads(body[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt header: {exc}") from exc
    pos = 16 + hlen
    arrays = {}
    for spec in header["arrays"]:
        dt = np.dtype(_DTYPES[spec["dtype"]])
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) * dt.itemsize
        chunk = body[pos:pos + n]
        if len(chunk) != n:
            raise FormatError("truncated payload")
        arrays[spec["name"]] = np.frombuffer(chunk, dtype=dt).reshape(shape, order="F").copy()
        pos += n
    if pos != len(body):
        raise FormatError("trailing bytes in payload")
    return header["meta"], arrays


def write(path: str | Path, magic: bytes, meta: Mapping, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(magic, meta, arrays))


def read(path: str | Path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), magic)
