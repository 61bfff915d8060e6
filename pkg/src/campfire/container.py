"""Self-describing binary container for named tensors plus a JSON header.

Shared conventions with the tile format: little-endian, length-prefixed
strings, mandatory magic and version. Used for model checkpoints and
embedding tables.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptTile

MAGIC = b"CMPC"
VERSION = 1

_DTYPES = {0: "<f4", 1: "u1", 2: "<i8", 3: "<f8"}
_CODES = {"float32": 0, "uint8": 1, "int64": 2, "float64": 3}


def write_container(path: str | Path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    raw_meta = json.dumps(meta).encode("utf-8")
    parts.append(struct.pack("<I", len(raw_meta)))
    parts.append(raw_meta)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.name not in _CODES:
            raise ValueError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", _CODES[arr.dtype.name], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CorruptTile(f"bad container magic in {path}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise CorruptTile(f"unsupported container version {version}")
    (meta_len,) = struct.unpack_from("<I", blob, 6)
    offset = 10
    meta = json.loads(blob[offset : offset + meta_len].decode("utf-8"))
    offset += meta_len
    (n_tensors,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        code, ndim = struct.unpack_from("<BB", blob, offset)
        offset += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        dtype = np.dtype(_DTYPES[code])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        if offset + nbytes > len(blob):
            raise CorruptTile(f"truncated tensor {name!r} in {path}")
        tensors[name] = np.frombuffer(blob, dtype=dtype, count=max(int(np.prod(shape)), 1) if ndim else 1, offset=offset).reshape(shape).copy()
        offset += nbytes
    return meta, tensors
