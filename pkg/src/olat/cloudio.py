"""Point cloud files.

Binary (``.pcb``): ``b"PCB1"``, little-endian uint32 count, then count*3
little-endian float32 coordinates. Anything else is ASCII, one ``x y z``
per line.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"PCB1"
_HEADER = len(MAGIC) + 4


def encode_binary(points) -> bytes:
    pts = np.ascontiguousarray(points, dtype="<f4")
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got {pts.shape}")
    return MAGIC + struct.pack("<I", pts.shape[0]) + pts.tobytes()


def decode_binary(data: bytes) -> np.ndarray:
    for i, expected in enumerate(MAGIC):
        if i >= len(data):
            raise FormatError("file truncated inside magic", offset=len(data))
        if data[i] != expected:
            raise FormatError("bad magic, not a PCB1 cloud", offset=i)
    if len(data) < _HEADER:
        raise FormatError("file truncated inside point count", offset=len(data))
    (count,) = struct.unpack_from("<I", data, len(MAGIC))
    end = _HEADER + 12 * count
    if len(data) < end:
        raise FormatError(f"file truncated: header declares {count} points", offset=len(data))
    if len(data) > end:
        raise FormatError("trailing bytes after point data", offset=end)
    return np.frombuffer(data, dtype="<f4", count=3 * count, offset=_HEADER).reshape(count, 3).astype(np.float32)


def encode_ascii(points) -> bytes:
    pts = np.asarray(points, dtype=np.float64)
    return "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pts.tolist()).encode()


def decode_ascii(data: bytes) -> np.ndarray:
    rows = []
    offset = 0
    for line in data.splitlines(keepends=True):
        text = line.strip()
        if text:
            parts = text.split()
            try:
                if len(parts) != 3:
                    raise ValueError
                rows.append([float(p) for p in parts])
            except ValueError:
                raise FormatError(f"expected 'x y z', got {text[:40]!r}", offset=offset) from None
        offset += len(line)
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def is_binary_path(path) -> bool:
    return Path(path).suffix.lower() == ".pcb"


def write_cloud(path, points, binary: bool | None = None) -> None:
    binary = is_binary_path(path) if binary is None else binary
    data = encode_binary(points) if binary else encode_ascii(points)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_cloud(path, binary: bool | None = None) -> np.ndarray:
    binary = is_binary_path(path) if binary is None else binary
    data = Path(path).read_bytes()
    try:
        return decode_binary(data) if binary else decode_ascii(data)
    except FormatError as exc:
        err = FormatError(f"{path}: {exc}")
        err.offset = exc.offset
        raise err from exc
