"""Binary checkpoint container shared by all trainable components.

Layout (little-endian): 4-byte magic, u32 version, u64 config length, UTF-8
JSON config, then per tensor: u32 name length, name, u32 rank, u64 dims,
float32 row-major data.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Mapping, Tuple

import numpy as np

from .errors import CorruptCheckpoint, MissingArtifact

VERSION = 1
MAGICS = (b"NAEC", b"PRXY")


def write_container(path, magic: bytes, config: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    if magic not in MAGICS:
        raise ValueError(f"unknown magic {magic!r}")
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [magic, struct.pack("<IQ", VERSION, len(blob)), blob]
    for name in tensors:
        # ascontiguousarray promotes 0-d arrays to 1-d, so restore the shape
        arr = np.ascontiguousarray(tensors[name], dtype="<f4").reshape(np.shape(tensors[name]))
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_container(path, magic: bytes) -> Tuple[dict, Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != magic:
        raise CorruptCheckpoint(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    try:
        version, blob_len = struct.unpack_from("<IQ", raw, 4)
        if version != VERSION:
            raise CorruptCheckpoint(f"{path}: unsupported version {version}")
        pos = 16
        if pos + blob_len > len(raw):
            raise CorruptCheckpoint(f"{path}: truncated config blob")
        config = json.loads(raw[pos : pos + blob_len].decode("utf-8"))
        pos += blob_len
        tensors: Dict[str, np.ndarray] = {}
        while pos < len(raw):
            (name_len,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", raw, pos)
            pos += 8 * rank
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            end = pos + 4 * count
            if end > len(raw):
                raise CorruptCheckpoint(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(raw[pos:end], dtype="<f4").reshape(dims).copy()
            pos = end
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        if isinstance(exc, CorruptCheckpoint):
            raise
        raise CorruptCheckpoint(f"{path}: {exc}") from exc
    return config, tensors
