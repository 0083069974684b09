"""Binary checkpoint format for named float64 tensors.

Layout (all integers little-endian):

    magic   4 bytes  "FSWT"
    version u16      currently 1
    count   u32      number of named tensors
    per tensor:
        name_len u16, name UTF-8 bytes
        rank     u8,  dims u32 each
        data     float64 little-endian, row-major

Round-trips are bit-exact; tensors are written sorted by name so that a
load/save cycle reproduces the file byte for byte.
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"FSWT"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


def save_checkpoint(path: str, tensors: Mapping[str, Tensor | np.ndarray]) -> None:
    blobs = []
    for name in sorted(tensors):
        arr = tensors[name].data if isinstance(tensors[name], Tensor) else np.asarray(tensors[name])
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d arrays 0-d
        enc = name.encode("utf-8")
        header = struct.pack("<H", len(enc)) + enc + struct.pack("<B", arr.ndim)
        header += b"".join(struct.pack("<I", d) for d in arr.shape)
        blobs.append(header + arr.astype("<f8", copy=False).tobytes())
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<H", VERSION) + struct.pack("<I", len(blobs)))
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 10:
        raise CheckpointError("truncated checkpoint header")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", raw, 6)
    out: dict[str, np.ndarray] = {}
    off = 10
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", raw, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            end = off + 8 * n
            if end > len(raw):
                raise struct.error("data out of bounds")
            data = np.frombuffer(raw[off:end], dtype="<f8").reshape(dims).copy()
            off = end
        except (struct.error, UnicodeDecodeError) as e:
            raise CheckpointError(f"truncated or corrupt checkpoint: {e}") from None
        out[name] = data
    if off != len(raw):
        raise CheckpointError(f"{len(raw) - off} trailing bytes after {count} tensors")
    return out
