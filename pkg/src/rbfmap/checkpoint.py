"""RBFM1 binary checkpoints.

Layout (all integers uint32 little-endian)::

    b"RBFM1"
    repeated until EOF:
        name length, name (utf-8), rank, dims[rank], float64 LE payload
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

MAGIC = b"RBFM1"


def encode(params: dict) -> bytes:
    parts = [MAGIC]
    for name, p in params.items():
        data = np.ascontiguousarray(getattr(p, "data", p), dtype="<f8")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    return b"".join(parts)


def decode(blob: bytes, source="checkpoint") -> dict:
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{source}: bad magic {blob[:len(MAGIC)]!r}, expected {MAGIC!r}")
    pos = len(MAGIC)
    out: dict = {}

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"{source}: truncated at offset {pos}, needed {n} more bytes")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64)
        if name in out:
            raise FormatError(f"{source}: parameter {name!r} appears twice")
        out[name] = values.reshape(dims)
    return out


def save_checkpoint(model, path) -> None:
    Path(path).write_bytes(encode(model.params))


def load_checkpoint(model, path) -> None:
    """Copy stored values into ``model``; names and shapes must match exactly."""
    stored = decode(Path(path).read_bytes(), source=str(path))
    missing = [n for n in model.params if n not in stored]
    extra = [n for n in stored if n not in model.params]
    if missing or extra:
        raise ConfigError(
            f"{path}: checkpoint does not match architecture; missing {missing}, unexpected {extra}"
        )
    for name, value in stored.items():
        p = model.params[name]
        if p.data.shape != value.shape:
            raise ConfigError(f"{path}: parameter {name!r} has shape {value.shape}, model expects {p.data.shape}")
    for name, value in stored.items():
        model.params[name].data[...] = value
