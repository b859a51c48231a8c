"""Binary checkpoint container: named float32 tensors plus a JSON metadata trailer.

Layout (little-endian)::

    b"FSPK" | u32 version | u32 count
    count x { u32 name_len | name (UTF-8) | u8 rank | rank x u64 dim | float32 data }
    JSON metadata (UTF-8, sorted keys)
    u64 byte offset of the JSON block
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"FSPK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if not np.issubdtype(arr.dtype, np.floating):
            raise CheckpointError(f"tensor {name!r} is not floating point ({arr.dtype})")
        raw = name.encode("utf-8")
        if arr.ndim > 255:
            raise CheckpointError(f"tensor {name!r} has rank {arr.ndim} > 255")
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    trailer = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return body + trailer + struct.pack("<Q", len(body))


def loads(blob: bytes) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    (meta_off,) = struct.unpack_from("<Q", blob, len(blob) - 8)
    if not 12 <= meta_off <= len(blob) - 8:
        raise CheckpointError("corrupt footer offset")
    pos = 12
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            size = int(np.prod(shape, dtype=np.int64)) if rank else 1
            if pos + 4 * size > meta_off:
                raise CheckpointError(f"tensor {name!r} overruns the data block")
            tensors[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).astype(np.float32).reshape(shape)
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != meta_off:
        raise CheckpointError("tensor block does not end at the metadata offset")
    try:
        meta = json.loads(blob[meta_off:len(blob) - 8].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata: {exc}") from None
    return tensors, meta


def save(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Atomic write (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(tensors, meta))
    os.replace(tmp, path)


def load(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    return loads(Path(path).read_bytes())
