"""Flat little-endian parameter checkpoints.

Layout::

    magic       8 bytes   b"DFMCKPT\\0"
    version     u32       1
    meta_len    u32       length of the UTF-8 metadata text that follows
    meta        bytes     free-form text (the run config)
    n_tensors   u32
    per tensor:
        name_len  u16, name (UTF-8)
        ndim      u8, dims u32 * ndim
        data      float64 * prod(dims), row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DFMCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: str = "") -> None:
    meta_b = meta.encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_b)), meta_b, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:8]!r}, expected {MAGIC!r}")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, meta_len = take("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = buf[pos:pos + meta_len].decode("utf-8")
    pos += meta_len
    (n,) = take("<I")
    out = {}
    for _ in range(n):
        (nlen,) = take("<H")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = take("<B")
        dims = take(f"<{ndim}I") if ndim else ()
        count = int(np.prod(dims)) if dims else 1
        if pos + 8 * count > len(buf):
            raise CheckpointError(f"truncated data for {name}")
        out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * count
    return out, meta


def state_dict(module) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in module.named_parameters()}


def load_state_dict(module, state: dict[str, np.ndarray]) -> None:
    params = dict(module.named_parameters())
    missing = set(params) - set(state)
    if missing:
        raise CheckpointError(f"checkpoint lacks {sorted(missing)[:5]}")
    for name, p in params.items():
        arr = state[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
        p.data[...] = arr
