"""
Checkpoint files.

Layout (all integers little-endian)::

    b"LMOE" | u32 version | u64 header length | UTF-8 JSON header | tensor blobs

The header holds the run metadata, a manifest entry per tensor (name, shape,
dtype, byte offset into the blob section, byte length) and a SHA-256 over the
canonical header-without-checksum plus every blob byte. The header is written
in canonical form (sorted keys, no whitespace), so any altered header byte
either breaks parsing or fails the checksum.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IncompatibleVersionError, IntegrityError

MAGIC = b"LMOE"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"float32": "<f4", "float64": "<f8"}


@dataclass
class CheckpointData:
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def write_checkpoint(path: str | os.PathLike, meta: dict, tensors: dict[str, np.ndarray]) -> int:
    """Write atomically (temp file + rename); returns the file size in bytes."""
    manifest, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.name
        if dtype not in _DTYPES:
            raise ValueError(f"{name}: unsupported dtype {dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"format_version": VERSION, "meta": meta, "tensors": manifest}
    digest = hashlib.sha256(_canonical(header))
    for raw in blobs:
        digest.update(raw)
    header["checksum"] = digest.hexdigest()
    head = _canonical(header)

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
        f.write(head)
        for raw in blobs:
            f.write(raw)
    os.replace(tmp, path)
    return path.stat().st_size


def read_checkpoint(path: str | os.PathLike) -> CheckpointData:
    """Parse and fully verify a checkpoint before returning anything."""
    buf = Path(path).read_bytes()
    if len(buf) < _PREFIX.size:
        raise IntegrityError(f"{path}: file too short for a checkpoint header")
    magic, version, head_len = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise IntegrityError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise IncompatibleVersionError(f"{path}: checkpoint format version {version}, this build reads {VERSION}")
    start = _PREFIX.size
    if start + head_len > len(buf):
        raise IntegrityError(f"{path}: header length {head_len} runs past end of file")
    head = buf[start:start + head_len]
    try:
        header = json.loads(head.decode("utf-8"))
        checksum = header.pop("checksum")
        manifest = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
        raise IntegrityError(f"{path}: unreadable header ({exc})") from None
    if header.get("format_version") != VERSION:
        raise IncompatibleVersionError(f"{path}: header declares version {header.get('format_version')}")
    if _canonical({**header, "checksum": checksum}) != head:
        raise IntegrityError(f"{path}: header is not in canonical form")

    body = memoryview(buf)[start + head_len:]
    expected = sum(int(e["nbytes"]) for e in manifest)
    if len(body) != expected:
        raise IntegrityError(f"{path}: blob section is {len(body)} bytes, manifest expects {expected}")
    digest = hashlib.sha256(_canonical(header))
    digest.update(body)
    if digest.hexdigest() != checksum:
        raise IntegrityError(f"{path}: checksum mismatch")

    tensors = {}
    for e in manifest:
        dt = np.dtype(_DTYPES[e["dtype"]])
        raw = body[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype=dt).reshape(e["shape"]).astype(e["dtype"])
    return CheckpointData(meta=header["meta"], tensors=tensors)
