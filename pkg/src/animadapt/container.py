"""Binary container for named float64 arrays.

Layout (all integers little-endian)::

    0         4 bytes   magic b"AAWC"
    4         u32       format version (1)
    8         u64       header length H
    16        H bytes   UTF-8 JSON header (sorted keys, compact separators)
    16+H      payload   little-endian float64 arrays, back to back
    end-32    32 bytes  SHA-256 of everything before it (the content hash)

The header is ``{"version", "entries", "meta", "base_hash"}`` where each entry is
``{"name", "shape", "dtype": "f64", "offset"}`` and ``offset`` is relative to
the payload start. Entries are stored sorted by name, which makes
save -> load -> save byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"AAWC"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DIGEST = 32


class ContainerError(ValueError):
    """Malformed, corrupted or mismatched container."""


class HashMismatch(ContainerError):
    pass


@dataclass
class Container:
    entries: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    base_hash: str | None = None
    content_hash: str | None = None


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def to_bytes(entries: Mapping[str, np.ndarray], meta: Mapping | None = None, base_hash: str | None = None) -> bytes:
    header_entries = []
    chunks = []
    offset = 0
    for name in sorted(entries):
        arr = np.ascontiguousarray(entries[name], dtype="<f8")
        if not np.all(np.isfinite(arr)):
            raise ContainerError(f"entry {name!r} has non-finite values")
        header_entries.append({"name": name, "shape": list(arr.shape), "dtype": "f64", "offset": offset})
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    header = _canonical_json(
        {"version": FORMAT_VERSION, "entries": header_entries, "meta": dict(meta or {}), "base_hash": base_hash}
    )
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def from_bytes(data: bytes) -> Container:
    if len(data) < _PREFIX.size + _DIGEST:
        raise ContainerError("container truncated")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise HashMismatch("container content hash does not verify")
    magic, version, hlen = _PREFIX.unpack_from(body)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {version}")
    header = json.loads(body[_PREFIX.size : _PREFIX.size + hlen].decode("utf-8"))
    payload = body[_PREFIX.size + hlen :]
    entries = {}
    end_prev = 0
    for e in header["entries"]:
        if e["dtype"] != "f64":
            raise ContainerError(f"unsupported dtype {e['dtype']!r}")
        n = int(np.prod(e["shape"], dtype=np.int64)) * 8
        start = e["offset"]
        if start < end_prev or start + n > len(payload):
            raise ContainerError(f"entry {e['name']!r} overlaps or is out of bounds")
        end_prev = start + n
        entries[e["name"]] = np.frombuffer(payload, dtype="<f8", count=n // 8, offset=start).reshape(e["shape"]).astype(np.float64)
    if end_prev != len(payload):
        raise ContainerError("trailing bytes in payload")
    return Container(entries, header["meta"], header["base_hash"], digest.hex())


def content_hash(data: bytes) -> str:
    return data[-_DIGEST:].hex()


def save(path, entries: Mapping[str, np.ndarray], meta: Mapping | None = None, base_hash: str | None = None) -> str:
    """Write a container; returns its content hash (hex)."""
    data = to_bytes(entries, meta, base_hash)
    Path(path).write_bytes(data)
    return content_hash(data)


def load(path) -> Container:
    return from_bytes(Path(path).read_bytes())


def check_base(adaptor: Container, base: Container, allow_mismatch: bool = False) -> None:
    """Refuse an adaptor trained against a different base model."""
    if adaptor.base_hash != base.content_hash and not allow_mismatch:
        raise HashMismatch(
            f"adaptor was trained against base {adaptor.base_hash}, got {base.content_hash}"
        )


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
