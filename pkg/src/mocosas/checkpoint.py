"""Named-array checkpoint files.

Layout (all integers little-endian)::

    b"MSAS"  u32 version  u32 count
    count x { u16 name_len, utf-8 name, u8 rank, rank x u32 dim, float64 payload }

Arrays are written as little-endian float64 so a save/load round trip is
bit-exact. Integer state (step counters, queue pointers) is stored as 0-d arrays.
"""

import os
import struct
from typing import Dict, Mapping

import numpy as np

MAGIC = b"MSAS"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: Mapping[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"parameter name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"rank {arr.ndim} too large for {name}")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def load_arrays(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 12
    out: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * n > len(buf):
                raise CheckpointError(f"{path}: truncated payload for {name}")
            arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(dims)
            pos += 8 * n
            out[name] = arr.astype(np.float64)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated file") from exc
    return out
