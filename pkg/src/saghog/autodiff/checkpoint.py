"""``SGCK`` checkpoint format.

Layout (little endian)::

    b"SGCK"  u32 version
    u32 meta_len, meta_len bytes of UTF-8 JSON
    u32 n_params, then per parameter:
        u32 name_len, name bytes, u32 rank, rank * u32 extents, float32 data
    u32 n_state, then optimizer records in the same layout
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"SGCK"
VERSION = 1


def _write_records(fh: BinaryIO, tensors: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode()
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def _read_records(fh: BinaryIO) -> dict[str, np.ndarray]:
    (n,) = struct.unpack("<I", fh.read(4))
    out = {}
    for _ in range(n):
        (ln,) = struct.unpack("<I", fh.read(4))
        name = fh.read(ln).decode()
        (rank,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
        count = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    return out


def save_checkpoint(
    path: str | Path,
    params: dict[str, np.ndarray],
    meta: dict | None = None,
    opt_state: dict[str, np.ndarray] | None = None,
) -> None:
    meta_raw = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(meta_raw)))
        fh.write(meta_raw)
        _write_records(fh, params)
        _write_records(fh, opt_state or {})


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict, dict[str, np.ndarray]]:
    """Return ``(params, meta, optimizer_state)``."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not an SGCK checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (ln,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(ln).decode())
        params = _read_records(fh)
        opt = _read_records(fh)
    return params, meta, opt


def read_meta(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not an SGCK checkpoint")
        fh.read(4)
        (ln,) = struct.unpack("<I", fh.read(4))
        return json.loads(fh.read(ln).decode())
