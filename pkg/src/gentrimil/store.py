"""Versioned binary array files with JSON sidecars.

Layout: ``MAGIC | u32 version | u64 header length | JSON header | raw
little-endian arrays``.  Nothing time- or host-dependent is written, so
identical arrays produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GMILARR\x00"
FORMAT_VERSION = 1


class StoreError(ValueError):
    pass


def encode_arrays(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype=np.dtype(arrays[name].dtype).newbyteorder("<"))
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode()
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(blobs)


def decode_arrays(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:len(MAGIC)] != MAGIC:
        raise StoreError("not a gentrimil array file")
    pos = len(MAGIC)
    version, hlen = struct.unpack_from("<IQ", blob, pos)
    if version != FORMAT_VERSION:
        raise StoreError(f"unsupported format version {version}")
    pos += struct.calcsize("<IQ")
    header = json.loads(blob[pos:pos + hlen])
    base = pos + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        arrays[e["name"]] = np.frombuffer(blob[start:start + e["nbytes"]], dtype=e["dtype"]).reshape(e["shape"]).copy()
    return arrays, header["meta"]


def save(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> str:
    """Write ``path`` plus ``path.json`` sidecar; returns the content hash."""
    path = Path(path)
    blob = encode_arrays(arrays, meta)
    digest = hashlib.sha256(blob).hexdigest()
    path.write_bytes(blob)
    sidecar = {**(meta or {}), "format_version": FORMAT_VERSION, "content_hash": digest,
               "file": path.name}
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return digest


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    arrays, meta = decode_arrays(blob)
    meta = {**meta, "content_hash": hashlib.sha256(blob).hexdigest()}
    return arrays, meta


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def content_hash(arrays: dict[str, np.ndarray], meta: dict | None = None) -> str:
    return hashlib.sha256(encode_arrays(arrays, meta)).hexdigest()
