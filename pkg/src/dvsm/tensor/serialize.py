"""Named-tensor binary container.

Layout (little endian)::

    b"DVSM" | u32 version=1 | u32 meta_len | meta_len bytes UTF-8 JSON
    then, repeated until EOF:
    u32 name_len | name (UTF-8) | u8 rank | rank x u64 extents | f32 payload
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"DVSM"
VERSION = 1


class ContainerError(ValueError):
    """Raised for malformed or truncated container files."""


def dumps(tensors: Mapping[str, np.ndarray], metadata: Mapping[str, Any] | None = None) -> bytes:
    meta = json.dumps(dict(metadata or {}), sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta]
    for name, arr in tensors.items():
        arr = np.asarray(getattr(arr, "data", arr))
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if buf[:4] != MAGIC:
        raise ContainerError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    try:
        version, meta_len = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise ContainerError(f"unsupported container version {version}")
        pos = 12
        metadata = json.loads(buf[pos:pos + meta_len].decode())
        pos += meta_len
        tensors: dict[str, np.ndarray] = {}
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode()
            pos += n
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            nbytes = 4 * count
            if pos + nbytes > len(buf):
                raise ContainerError(f"truncated payload for tensor {name!r}")
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
            pos += nbytes
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt container: {exc}") from exc
    return tensors, metadata


def save(path, tensors: Mapping[str, np.ndarray], metadata: Mapping[str, Any] | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, metadata))


def load(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return loads(Path(path).read_bytes())
