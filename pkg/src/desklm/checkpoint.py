"""Checkpoint file format: JSON manifest header + little-endian tensor blob.

Layout:
    bytes 0..7    magic b"DESKLMCK"
    bytes 8..15   u64 little-endian manifest length N
    bytes 16..    manifest, UTF-8 JSON (format_version, config, extra,
                  tensor index with shapes/dtypes/offsets, blob sha256)
    remainder     raw tensor bytes, row-major little-endian

The checksum covers the blob; a load validates it before any tensor is
materialized, so a truncated or corrupted file never yields a partial model.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CorruptionError, ManifestError, UnsupportedVersionError
from .tensor import Tensor

MAGIC = b"DESKLMCK"
FORMAT_VERSION = 1

_DTYPE_CODES = {"float32": "<f4", "float64": "<f8"}


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    extra: dict


def save_checkpoint(path, config: dict, tensors: dict, extra: dict | None = None) -> None:
    index = []
    chunks = []
    offset = 0
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        code = _DTYPE_CODES.get(arr.dtype.name)
        if code is None:
            raise ManifestError(f"tensor {name!r} has unsupported dtype {arr.dtype.name}")
        raw = np.ascontiguousarray(arr).astype(code, copy=False).tobytes()
        index.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name,
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "extra": extra or {},
        "tensors": index,
        "blob_nbytes": len(blob),
        "checksum": hashlib.sha256(blob).hexdigest(),
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16 or data[:8] != MAGIC:
        raise ManifestError(f"{path}: not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack("<Q", data[8:16])
    if len(data) < 16 + header_len:
        raise CorruptionError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ManifestError(f"{path}: unreadable manifest: {e}") from e
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"{path}: format version {version!r} not supported (this build reads {FORMAT_VERSION})")

    blob = data[16 + header_len:]
    if len(blob) != manifest["blob_nbytes"]:
        raise CorruptionError(
            f"{path}: blob is {len(blob)} bytes, manifest says {manifest['blob_nbytes']}")
    if hashlib.sha256(blob).hexdigest() != manifest["checksum"]:
        raise CorruptionError(f"{path}: checksum mismatch")

    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name in tensors:
            raise ManifestError(f"{path}: duplicate tensor {name!r}")
        code = _DTYPE_CODES.get(entry["dtype"])
        if code is None:
            raise ManifestError(f"{path}: tensor {name!r} has unsupported dtype {entry['dtype']}")
        lo, n = entry["offset"], entry["nbytes"]
        if lo < 0 or lo + n > len(blob):
            raise CorruptionError(f"{path}: tensor {name!r} extends past the blob")
        arr = np.frombuffer(blob[lo:lo + n], dtype=code).astype(entry["dtype"])
        tensors[name] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(config=manifest["config"], tensors=tensors, extra=manifest["extra"])
