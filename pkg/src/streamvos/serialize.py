"""Scalar-stream container shared by weight checkpoints and memory snapshots.

Layout (all integers little-endian)::

    magic    4 bytes  b"SVSS"
    version  u16
    hlen     u32      byte length of the JSON header
    header   hlen bytes, UTF-8 JSON:
             {"precision": "float64"|"float32",
              "entries": [{"name", "shape", "offset", "count"}, ...],
              "meta": {...}}
    payload  concatenated little-endian scalars; entry offsets count scalars
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import resolve_dtype

MAGIC = b"SVSS"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class FormatError(ValueError):
    """Malformed or incompatible scalar-stream file."""


def dumps(arrays: Mapping[str, np.ndarray], meta: Mapping | None = None, precision: str = "float64") -> bytes:
    dt = resolve_dtype(precision).newbyteorder("<")
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        a = np.asarray(arr)
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(np.ascontiguousarray(a, dtype=dt).tobytes())
        offset += a.size
    header = json.dumps(
        {"precision": np.dtype(precision).name, "entries": entries, "meta": dict(meta or {})},
        sort_keys=True,
    ).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def loads(blob: bytes, precision: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Parse a blob; returns (arrays, meta). Rejects a precision mismatch when one is requested."""
    if len(blob) < _PREFIX.size:
        raise FormatError(f"truncated prefix at byte offset {len(blob)}")
    magic, version, hlen = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte offset 0")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at byte offset 4")
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise FormatError(f"truncated header at byte offset {len(blob)}")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt header at byte offset {start}: {exc}") from None
    stored = header.get("precision")
    if precision is not None and np.dtype(precision).name != stored:
        raise FormatError(f"file holds {stored} scalars but {np.dtype(precision).name} was requested")
    dt = resolve_dtype(stored).newbyteorder("<")
    payload = start + hlen
    arrays: dict[str, np.ndarray] = {}
    for e in header["entries"]:
        lo = payload + e["offset"] * dt.itemsize
        hi = lo + e["count"] * dt.itemsize
        if hi > len(blob):
            raise FormatError(f"entry {e['name']!r} runs past end of file at byte offset {len(blob)}")
        arr = np.frombuffer(blob, dtype=dt, count=e["count"], offset=lo)
        arrays[e["name"]] = arr.astype(dt.newbyteorder("="), copy=True).reshape(e["shape"])
    return arrays, header.get("meta", {})


def save(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None, precision: str = "float64") -> None:
    Path(path).write_bytes(dumps(arrays, meta, precision))


def load(path: str | Path, precision: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes(), precision)
