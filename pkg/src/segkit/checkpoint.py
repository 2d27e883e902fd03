"""SSK1 checkpoint archives.

Layout::

    b"SSK1" | uint64 LE index length | JSON index (utf-8) | payload

The index lists ``{"name", "shape", "offset"}`` per array plus a free-form
``meta`` object. Payload arrays are little-endian float64, concatenated in
index order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SSK1"
FORMAT_VERSION = 1
_LE_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray], meta: dict | None = None,
                ) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        buf = np.ascontiguousarray(arr, dtype=_LE_F64).tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    index = json.dumps({"version": FORMAT_VERSION, "tensors": entries, "meta": meta or {}},
                       sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(index)))
        fh.write(index)
        for c in chunks:
            fh.write(c)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an SSK1 archive")
    (n,) = struct.unpack("<Q", raw[4:12])
    index = json.loads(raw[12:12 + n])
    if index.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {index.get('version')}")
    base = 12 + n
    arrays = {}
    for e in index["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        arr = np.frombuffer(raw, dtype=_LE_F64, count=count, offset=start)
        arrays[e["name"]] = arr.astype(np.float64).reshape(e["shape"])
    return arrays, index.get("meta", {})
