"""NT1 raw tensor format: ``NT1 <rank> <extent...>\\n`` + little-endian float32."""

from __future__ import annotations

import io
from pathlib import Path
from typing import BinaryIO

import numpy as np


class FormatError(ValueError):
    pass


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    header = " ".join(["NT1", str(arr.ndim)] + [str(int(s)) for s in arr.shape]) + "\n"
    return header.encode("ascii") + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def read_from(fh: BinaryIO) -> np.ndarray:
    start = fh.tell() if fh.seekable() else 0
    line = fh.readline()
    if not line.endswith(b"\n"):
        raise FormatError(f"NT1 header at byte {start} is not newline-terminated")
    parts = line.decode("ascii", errors="replace").split()
    if len(parts) < 2 or parts[0] != "NT1":
        raise FormatError(f"bad NT1 magic at byte {start}: {line[:16]!r}")
    try:
        rank = int(parts[1])
        shape = tuple(int(p) for p in parts[2:])
    except ValueError as exc:
        raise FormatError(f"non-integer NT1 header field at byte {start}") from exc
    if len(shape) != rank or any(s <= 0 for s in shape):
        raise FormatError(f"NT1 header at byte {start} declares rank {rank} but extents {shape}")
    n = int(np.prod(shape, dtype=np.int64))
    raw = fh.read(4 * n)
    if len(raw) != 4 * n:
        raise FormatError(f"NT1 payload at byte {start} truncated: wanted {4 * n} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)


def decode(buf: bytes) -> np.ndarray:
    return read_from(io.BytesIO(buf))


def save(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode(arr))


def load(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_from(fh)
