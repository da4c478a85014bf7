"""Binary checkpoint container.

Layout (all integers little-endian):

    magic  b"SSMC"
    u32    format version (currently 1)
    u32    tensor count
    per tensor:
        u32   name length, then UTF-8 name bytes
        u8    dtype code (0 = float64)
        u8    rank
        u64   extent per dimension
        payload: little-endian float64, row-major

Optimizer state and numeric config snapshots piggyback on the same tensor
records under the reserved ``__opt__/`` and ``__config__/`` name prefixes.
Save -> load -> save round-trips are byte-identical.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"SSMC"
VERSION = 1
DTYPE_F64 = 0

OPT_PREFIX = "__opt__/"
CONFIG_PREFIX = "__config__/"


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays in a fixed (sorted-name) order."""
    path = Path(path)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype=np.float64))
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<BB", DTYPE_F64, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    path.write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.blob):
            raise CheckpointError(f"truncated while reading {what}", offset=self.offset)
        out = self.blob[self.offset:self.offset + n]
        self.offset += n
        return out


def load_tensors(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic, not a checkpoint file", offset=0)
    version, count = struct.unpack("<II", r.take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version}", offset=4)
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", r.take(4, "name length"))
        name = r.take(name_len, "name").decode("utf-8")
        dtype_offset = r.offset
        dtype, rank = struct.unpack("<BB", r.take(2, "dtype/rank"))
        if dtype != DTYPE_F64:
            raise CheckpointError(
                f"unsupported dtype code {dtype} for tensor {name!r}",
                offset=dtype_offset,
            )
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank, "shape"))
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = r.take(8 * n, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    if r.offset != len(blob):
        raise CheckpointError("trailing bytes after last tensor", offset=r.offset)
    return out


def split_records(records: dict[str, np.ndarray]):
    """Partition raw records into (parameters, optimizer state, config values)."""
    params, opt, config = {}, {}, {}
    for name, arr in records.items():
        if name.startswith(OPT_PREFIX):
            opt[name[len(OPT_PREFIX):]] = arr
        elif name.startswith(CONFIG_PREFIX):
            config[name[len(CONFIG_PREFIX):]] = arr
        else:
            params[name] = arr
    return params, opt, config
