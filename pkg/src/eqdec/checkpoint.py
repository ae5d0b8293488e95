"""Versioned binary checkpoints: named float64 tensors plus string metadata.

Layout (all little-endian, documented in docs/file_formats.md):
magic "EQCK", u32 version, u32 metadata count, metadata entries as
length-prefixed UTF-8 key/value pairs, u32 tensor count, then per
tensor: name, group tag, u8 rank, i64 dims, raw float64 data.
"""

from __future__ import annotations

import struct

import numpy as np

from .decoder import ParamRegistry

__all__ = ["CheckpointFormatError", "load_checkpoint", "save_checkpoint"]

_MAGIC = b"EQCK"
_VERSION = 1


class CheckpointFormatError(ValueError):
    """Raised for unreadable checkpoint files."""


def _write_str(fh, s: str) -> None:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("string too long for checkpoint format")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def _read_exact(fh, n: int, what: str) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return raw


def _read_str(fh, what: str) -> str:
    (n,) = struct.unpack("<H", _read_exact(fh, 2, what))
    return _read_exact(fh, n, what).decode("utf-8")


def save_checkpoint(path, reg: ParamRegistry, meta: dict[str, str]) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(meta)))
        for key in sorted(meta):
            _write_str(fh, key)
            _write_str(fh, str(meta[key]))
        names = reg.names()
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            # asarray keeps rank-0 shapes, which ascontiguousarray would
            # silently promote to rank 1
            value = np.asarray(reg[name], dtype="<f8", order="C")
            _write_str(fh, name)
            _write_str(fh, reg.group_of(name))
            fh.write(struct.pack("<B", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}q", *value.shape))
            fh.write(value.tobytes())


def load_checkpoint(path) -> tuple[ParamRegistry, dict[str, str]]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != _MAGIC:
            raise CheckpointFormatError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != _VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (n_meta,) = struct.unpack("<I", _read_exact(fh, 4, "metadata count"))
        meta = {}
        for _ in range(n_meta):
            key = _read_str(fh, "metadata key")
            meta[key] = _read_str(fh, "metadata value")
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        reg = ParamRegistry()
        for _ in range(n_tensors):
            name = _read_str(fh, "tensor name")
            group = _read_str(fh, "tensor group")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "tensor rank"))
            shape = struct.unpack(f"<{ndim}q", _read_exact(fh, 8 * ndim, "tensor dims"))
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            raw = _read_exact(fh, 8 * count, f"tensor {name!r} data")
            reg.add(name, group, np.frombuffer(raw, dtype="<f8").reshape(shape))
        if fh.read(1):
            raise CheckpointFormatError("trailing bytes after the last tensor")
    return reg, meta
