"""Flat binary container for named float64 parameter arrays.

Layout (all integers little-endian u32 unless noted):

    magic   8 bytes  b"MNEWCKPT"
    version u32      currently 1
    count   u32      number of parameters
    per parameter:
        name_len u32
        name     name_len bytes, UTF-8
        rank     u32
        dims     rank x u32
        payload  product(dims) little-endian float64, row-major
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"MNEWCKPT"
VERSION = 1

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "load_into"]


class CheckpointError(Exception):
    """Raised for malformed, truncated or mismatched checkpoint files."""


def save_checkpoint(path, params) -> None:
    """Write a name -> array mapping (or a ParameterRegistry) to ``path``."""
    if hasattr(params, "items"):
        items = [(name, np.asarray(_data(p), dtype=np.float64)) for name, p in params.items()]
    else:
        items = [(p.name, np.asarray(p.tensor.data, dtype=np.float64)) for p in params]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(items)))
        for name, arr in items:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _data(p):
    return p.tensor.data if hasattr(p, "tensor") else p


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into a name -> float64 array dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic in {path}")
    version, count = struct.unpack_from("<II", blob, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} in {path}")
    off = len(MAGIC) + 8
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + name_len].decode("utf-8")
            if len(blob) < off + name_len:
                raise struct.error("short name")
            off += name_len
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = blob[off : off + 8 * n]
            if len(payload) < 8 * n:
                raise struct.error("short payload")
            off += 8 * n
        except struct.error as exc:
            raise CheckpointError(f"truncated checkpoint {path}: {exc}") from exc
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    return out


def load_into(registry, path) -> None:
    """Load a checkpoint into an existing registry; names and shapes must match."""
    loaded = load_checkpoint(path)
    names = set(registry.names())
    if names != set(loaded):
        missing = sorted(names - set(loaded))
        extra = sorted(set(loaded) - names)
        raise CheckpointError(
            f"checkpoint/model parameter mismatch: missing {missing}, unexpected {extra}"
        )
    for name, arr in loaded.items():
        target = registry[name].tensor
        if target.data.shape != arr.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: model {target.data.shape}, "
                f"checkpoint {arr.shape}"
            )
        target.data = np.ascontiguousarray(arr)
