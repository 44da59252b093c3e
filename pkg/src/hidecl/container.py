"""Flat binary container for model state (weights, prompts, heads, stats).

Layout: magic "HIDE1", then repeated entries of
{name length (u32 LE), name (UTF-8), dtype code (u8: 0=f32, 1=f64),
 rank (u8), dims (u32 LE each), raw little-endian data}.
Entries are written in sorted name order so identical state produces
identical bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"HIDE1"

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class ContainerError(ValueError):
    """Malformed container; `offset` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def save_container(path: str | Path, entries: dict[str, np.ndarray]) -> None:
    """Write named float arrays to `path` in the HIDE1 format."""
    chunks = [MAGIC]
    for name in sorted(entries):
        arr = np.asarray(entries[name])
        if arr.dtype not in _CODE_FOR_KIND:
            arr = arr.astype(np.float64)
        code = _CODE_FOR_KIND[arr.dtype]
        raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(raw)
    Path(path).write_bytes(b"".join(chunks))


def load_container(path: str | Path) -> dict[str, np.ndarray]:
    """Read a HIDE1 file back into {name: array}."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise ContainerError("missing HIDE1 magic", 0)
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}
    while pos < len(data):
        start = pos
        if pos + 4 > len(data):
            raise ContainerError("truncated name length", pos)
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + name_len > len(data):
            raise ContainerError("truncated name", pos)
        try:
            name = data[pos : pos + name_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerError(f"bad entry name: {exc}", pos) from exc
        pos += name_len
        if pos + 2 > len(data):
            raise ContainerError(f"truncated header for '{name}'", pos)
        code, rank = struct.unpack_from("<BB", data, pos)
        pos += 2
        if code not in _DTYPE_CODES:
            raise ContainerError(f"unknown dtype code {code} for '{name}'", pos - 2)
        if pos + 4 * rank > len(data):
            raise ContainerError(f"truncated dims for '{name}'", pos)
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        dtype = _DTYPE_CODES[code]
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = count * dtype.itemsize
        if pos + nbytes > len(data):
            raise ContainerError(f"truncated data for '{name}'", pos)
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos).reshape(dims)
        pos += nbytes
        if name in out:
            raise ContainerError(f"duplicate entry '{name}'", start)
        out[name] = arr.copy()
    return out
