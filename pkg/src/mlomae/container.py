"""Binary tensor container: magic 'MLOM', then named float64 arrays.

Layout (little-endian throughout):
    4 bytes magic 'MLOM'
    u32 format version
    u32 tensor count
    per tensor: u32 name length, name bytes (utf-8), u32 rank,
                u32 per dimension, then raw float64 data (C order)

Entries are written in sorted-name order, so save -> load -> save is
byte-identical. Used for checkpoints and for serialized dataset bundles.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataFormatError

MAGIC = b"MLOM"
VERSION = 1


def write_container(path: str, tensors: dict[str, np.ndarray], version: int = VERSION) -> None:
    names = sorted(tensors)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", version, len(names)))
        for name in names:
            arr = np.asarray(tensors[name], dtype=np.float64)
            if arr.ndim:
                arr = np.ascontiguousarray(arr)  # ascontiguousarray would promote 0-d to (1,)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes(order="C"))


def read_container(path: str) -> tuple[int, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise DataFormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    off = 4

    def take(fmt: str):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise DataFormatError(f"{path}: truncated at byte {off}")
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    version, count = take("<II")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = take("<I")
        if off + nlen > len(blob):
            raise DataFormatError(f"{path}: truncated name at byte {off}")
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = take("<I")
        shape = tuple(take("<I")[0] for _ in range(rank))
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        nbytes = 8 * n
        if off + nbytes > len(blob):
            raise DataFormatError(f"{path}: truncated data for tensor {name!r}")
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
        out[name] = np.ascontiguousarray(arr) if rank else arr.reshape(())
        off += nbytes
    if off != len(blob):
        raise DataFormatError(f"{path}: {len(blob) - off} trailing bytes")
    return version, out
