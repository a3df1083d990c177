"""Flat binary checkpoint container.

Layout (little-endian):
    magic   4 bytes  b"TTCK"
    version u32      currently 1
    mlen    u32      length of the UTF-8 JSON metadata block
    meta    mlen bytes
    count   u32      number of arrays
    per array:
        nlen  u16, name (UTF-8)
        ndim  u8, dims (u64 each)
        data  float64, row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TTCK"
VERSION = 1


def save_arrays(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path} is not a ttclab checkpoint")
        version, mlen = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        meta = json.loads(f.read(mlen).decode("utf-8"))
        (count,) = struct.unpack("<I", f.read(4))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(f.read(8 * n), dtype=np.float64).reshape(shape)
            arrays[name] = data.copy()
    return meta, arrays
