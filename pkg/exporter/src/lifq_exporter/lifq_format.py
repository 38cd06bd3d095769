"""Standalone LIFQ feature-file writer/reader per the published byte layout.

Layout (little-endian throughout): magic b"LIFQ", version u16 = 1, tensor
count u8 = 2, then per tensor dtype u8 (1 = float32), ndim u8, dims u32[ndim]
and row-major float32 data; then the MOS label as float64 and the record id
as a u16 length-prefixed UTF-8 string. Files written here are byte-identical
to those produced by the consuming library.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LIFQ"
VERSION = 1
DTYPE_FLOAT32 = 1


class LifqFormatError(Exception):
    pass


def _pack_tensor(array: np.ndarray) -> bytes:
    values = np.asarray(array, dtype="<f4")
    return (struct.pack("<BB", DTYPE_FLOAT32, values.ndim)
            + struct.pack(f"<{values.ndim}I", *values.shape)
            + values.tobytes())


def write_record(path: str | Path, record_id: str, stage3: np.ndarray,
                 stage4: np.ndarray, mos: float) -> None:
    encoded_id = record_id.encode("utf-8")
    payload = b"".join([
        MAGIC,
        struct.pack("<HB", VERSION, 2),
        _pack_tensor(stage3),
        _pack_tensor(stage4),
        struct.pack("<d", float(mos)),
        struct.pack("<H", len(encoded_id)),
        encoded_id,
    ])
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


class _Cursor:
    def __init__(self, payload: bytes, path: str):
        self.payload = payload
        self.offset = 0
        self.path = path

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.payload):
            raise LifqFormatError(f"{self.path}: truncated in {what}")
        out = self.payload[self.offset:self.offset + count]
        self.offset += count
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_record(path: str | Path) -> tuple[str, np.ndarray, np.ndarray, float]:
    """Returns (id, stage3, stage4, mos); raises LifqFormatError on damage."""
    cursor = _Cursor(Path(path).read_bytes(), str(path))
    if cursor.take(4, "magic") != MAGIC:
        raise LifqFormatError(f"{path}: bad magic")
    version, count = cursor.unpack("<HB", "header")
    if version != VERSION:
        raise LifqFormatError(f"{path}: unsupported version {version}")
    if count != 2:
        raise LifqFormatError(f"{path}: expected 2 tensors, got {count}")

    def read_tensor():
        dtype, ndim = cursor.unpack("<BB", "tensor header")
        if dtype != DTYPE_FLOAT32:
            raise LifqFormatError(f"{path}: unexpected dtype code {dtype}")
        dims = cursor.unpack(f"<{ndim}I", "dims")
        total = int(np.prod(dims)) if dims else 1
        raw = cursor.take(4 * total, "tensor data")
        return np.frombuffer(raw, dtype="<f4").reshape(dims).copy()

    stage3 = read_tensor()
    stage4 = read_tensor()
    (mos,) = cursor.unpack("<d", "mos")
    (id_len,) = cursor.unpack("<H", "id length")
    record_id = cursor.take(id_len, "id").decode("utf-8")
    if cursor.offset != len(cursor.payload):
        raise LifqFormatError(f"{path}: trailing bytes")
    return record_id, stage3, stage4, mos
