"""Binary parameter checkpoints.

Layout: 4-byte magic ``FMW1``, little-endian uint32 parameter count, then per
parameter: uint32 name length + UTF-8 name, uint32 rank, uint32 dims, and the
values as little-endian float64 in row-major order. Round-trips bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import Parameter

MAGIC = b"FMW1"


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


def dump_parameters(params: Sequence[Parameter]) -> bytes:
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate parameter names in checkpoint")
    chunks = [MAGIC, struct.pack("<I", len(params))]
    for p in params:
        name = p.name.encode("utf-8")
        arr = np.ascontiguousarray(p.tensor.data, dtype="<f8")
        chunks.append(struct.pack("<I", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def parse_parameters(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r} at byte 0 (expected {MAGIC!r})")
    off = 4

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes for {what} at byte {off}")
        piece = blob[off:off + n]
        off += n
        return piece

    (count,) = struct.unpack("<I", take(4, "parameter count"))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n_vals = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(8 * n_vals, f"values of '{name}'"), dtype="<f8")
        out[name] = data.reshape(dims).astype(np.float64)
    if off != len(blob):
        raise CheckpointError(f"trailing bytes after parameters at byte {off}")
    return out


def save_checkpoint(params: Sequence[Parameter], path: str | Path) -> None:
    Path(path).write_bytes(dump_parameters(params))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return parse_parameters(Path(path).read_bytes())


def restore_parameters(params: Sequence[Parameter], values: dict[str, np.ndarray]) -> None:
    """Load `values` into `params` in place; names and shapes must match."""
    for p in params:
        if p.name not in values:
            raise CheckpointError(f"checkpoint missing parameter '{p.name}'")
        arr = values[p.name]
        if arr.shape != p.tensor.data.shape:
            raise CheckpointError(
                f"checkpoint shape mismatch for '{p.name}': {arr.shape} vs {p.tensor.data.shape}")
        p.tensor.data = arr.copy()
        p.tensor.grad = None
