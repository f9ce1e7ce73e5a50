"""Checkpoint archive (``.olat``).

Layout, all integers little-endian::

    b"OLAT1"
    u32 len, config text (key = value lines, utf-8)
    u32 len, metadata text (key = value lines, utf-8)
    u32 number of parameter sets
    per set:   u16 len, role; u32 number of arrays
    per array: u16 len, name; u8 ndim; ndim * u32 dims; float32 data (C order)

Arrays are stored as 32-bit floats, so float32 weights round-trip bit-exactly.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .errors import ConfigError, FormatError
from .models import ParameterSet

MAGIC = b"OLAT1"


@dataclass
class Checkpoint:
    config: TrainConfig
    sets: dict = field(default_factory=dict)  # role -> ParameterSet
    meta: dict = field(default_factory=dict)


def _text(d: dict) -> bytes:
    return "".join(f"{k} = {v}\n" for k, v in d.items()).encode()


def encode(ckpt: Checkpoint) -> bytes:
    out = [MAGIC]
    for blob in (ckpt.config.to_text().encode(), _text(ckpt.meta)):
        out.append(struct.pack("<I", len(blob)) + blob)
    out.append(struct.pack("<I", len(ckpt.sets)))
    for role, ps in ckpt.sets.items():
        rb = role.encode()
        out.append(struct.pack("<H", len(rb)) + rb + struct.pack("<I", len(ps.arrays)))
        for name, arr in ps.arrays.items():
            nb = name.encode()
            arr = np.asarray(arr, dtype="<f4", order="C")
            out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"checkpoint truncated while reading {what}", offset=len(self.data))
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _parse_text(blob: bytes, offset: int) -> dict:
    try:
        text = blob.decode()
    except UnicodeDecodeError:
        raise FormatError("text section is not utf-8", offset=offset) from None
    out = {}
    for line in text.splitlines():
        k, sep, v = line.partition(" = ")
        if not sep:
            raise FormatError(f"bad text line {line!r}", offset=offset)
        out[k] = v
    return out


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    head = data[:len(MAGIC)]
    if head != MAGIC[:len(head)]:
        bad = next(i for i, (a, b) in enumerate(zip(head, MAGIC)) if a != b)
        raise FormatError("bad magic, not an OLAT1 checkpoint", offset=bad)
    r.take(len(MAGIC), "magic")
    (n,) = r.unpack("<I", "config length")
    at = r.pos
    cfg_text = r.take(n, "config")
    try:
        config = TrainConfig.from_text(cfg_text.decode())
    except (ConfigError, UnicodeDecodeError) as exc:
        raise FormatError(f"bad embedded config: {exc}", offset=at) from None
    (n,) = r.unpack("<I", "metadata length")
    at = r.pos
    meta = _parse_text(r.take(n, "metadata"), at)
    (n_sets,) = r.unpack("<I", "set count")
    sets = {}
    for _ in range(n_sets):
        (rl,) = r.unpack("<H", "role length")
        role = r.take(rl, "role").decode(errors="replace")
        (n_arr,) = r.unpack("<I", "array count")
        arrays = {}
        for _ in range(n_arr):
            (nl,) = r.unpack("<H", "name length")
            name = r.take(nl, "array name").decode(errors="replace")
            (ndim,) = r.unpack("<B", "ndim")
            shape = r.unpack(f"<{ndim}I", "shape")
            count = int(np.prod(shape, dtype=np.int64))
            raw = r.take(4 * count, f"array {name}")
            arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        try:
            sets[role] = ParameterSet(role, arrays)
        except ValueError as exc:
            raise FormatError(str(exc), offset=r.pos) from None
    if r.pos != len(data):
        raise FormatError("trailing bytes after last parameter set", offset=r.pos)
    return Checkpoint(config, sets, meta)


def save(path, ckpt: Checkpoint) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode(ckpt))
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return decode(data)
    except FormatError as exc:
        err = FormatError(f"{path}: {exc}")
        err.offset = exc.offset
        raise err from exc
