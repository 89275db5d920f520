"""Binary checkpoint container.

Layout (all little-endian)::

    b"A2GCN" | u16 version | u32 n_users, n_items, n_attrs, dim, dim_out
    | i32 epoch | f64 best validation NDCG
    | u32 len + UTF-8 JSON config
    | u32 tensor count, then per tensor:
      u16 len + UTF-8 name | u8 ndim | u32 dims... | float32 data
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"A2GCN"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    epoch: int = 0
    best_val_ndcg: float = 0.0
    n_users: int = 0
    n_items: int = 0
    n_attrs: int = 0

    @property
    def dim(self) -> int:
        return int(self.params["user_emb"].shape[1])

    @property
    def dim_out(self) -> int:
        w1 = self.params.get("w1")
        return int(w1.shape[1]) if w1 is not None else self.dim

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<H5Iid", VERSION, self.n_users, self.n_items, self.n_attrs,
                              self.dim, self.dim_out, self.epoch, self.best_val_ndcg))
        blob = json.dumps(self.config, sort_keys=True).encode()
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
        buf.write(struct.pack("<I", len(self.params)))
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name], dtype="<f4")
            key = name.encode()
            buf.write(struct.pack("<H", len(key)))
            buf.write(key)
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        view = memoryview(data)
        if bytes(view[:5]) != MAGIC:
            raise CheckpointError("not an A2GCN checkpoint (bad magic)")
        pos = 5

        def take(fmt: str):
            nonlocal pos
            size = struct.calcsize(fmt)
            if pos + size > len(view):
                raise CheckpointError("truncated checkpoint")
            vals = struct.unpack_from(fmt, view, pos)
            pos += size
            return vals

        (version,) = take("<H")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        n_users, n_items, n_attrs, _dim, _dim_out = take("<5I")
        (epoch,) = take("<i")
        (best,) = take("<d")
        (blob_len,) = take("<I")
        config = json.loads(bytes(view[pos:pos + blob_len]).decode())
        pos += blob_len
        (count,) = take("<I")
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            (klen,) = take("<H")
            name = bytes(view[pos:pos + klen]).decode()
            pos += klen
            (ndim,) = take("<B")
            shape = take(f"<{ndim}I")
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(view):
                raise CheckpointError(f"truncated tensor {name!r}")
            params[name] = np.frombuffer(view[pos:pos + nbytes], dtype="<f4").reshape(shape).astype(np.float32)
            pos += nbytes
        return cls(params, config, epoch, best, n_users, n_items, n_attrs)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
