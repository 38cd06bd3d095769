"""Bit-exact feature interchange, dataset manifests, splits, synthetic data.

Feature file layout (all integers little-endian):

    magic   4 bytes  b"LIFQ"
    version u16      1
    count   u8       2 (stage3 tensor, then stage4 tensor)
    per tensor:
        dtype u8     1 = float32
        ndim  u8
        dims  u32 * ndim
        data  float32 * prod(dims), row-major
    mos     float64
    id      u16 length prefix + UTF-8 bytes

Checkpoints reuse the same tensor-block encoding under magic b"LIFC" with a
parameter-name index and float64 blocks (dtype code 2).
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError
from .tensor import Parameter

MAGIC_FEATURES = b"LIFQ"
MAGIC_CHECKPOINT = b"LIFC"
FORMAT_VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}

# Planted scoring function for synthetic data: bounded, mildly nonlinear,
# and dependent on both stages so a model must use both maps.
PLANTED_A = 3.0
PLANTED_B = 2.0
PLANTED_C = 1.0


@dataclass
class FeatureRecord:
    id: str
    stage3: np.ndarray
    stage4: np.ndarray
    mos: float


@dataclass
class Manifest:
    version: int
    records: list[dict]  # {"id": str, "path": str, "mos": float}
    metadata: dict = field(default_factory=dict)

    def ids(self) -> list[str]:
        return [r["id"] for r in self.records]

    def to_json(self) -> str:
        return json.dumps({"version": self.version, "records": self.records,
                           "metadata": self.metadata}, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "Manifest":
        raw = json.loads(text)
        return Manifest(version=raw["version"], records=raw["records"],
                        metadata=raw.get("metadata", {}))

    def save(self, path: str | Path) -> None:
        atomic_write_text(Path(path), self.to_json() + "\n")

    @staticmethod
    def load(path: str | Path) -> "Manifest":
        return Manifest.from_json(Path(path).read_text())


@dataclass
class SplitSpec:
    seed: int
    train_fraction: float = 0.8
    run_index: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    """Write via temp file + rename so readers never observe partial files."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def atomic_write_text(path: Path, payload: str) -> None:
    atomic_write_bytes(Path(path), payload.encode("utf-8"))


# -- feature files -------------------------------------------------------------


def _pack_tensor(array: np.ndarray, dtype_code: int) -> bytes:
    dtype = _DTYPE_CODES[dtype_code]
    # asarray keeps 0-d shapes intact; tobytes() emits row-major regardless
    # of the source strides.
    values = np.asarray(array, dtype=dtype)
    header = struct.pack("<BB", dtype_code, values.ndim)
    dims = struct.pack(f"<{values.ndim}I", *values.shape)
    return header + dims + values.tobytes()


class _Reader:
    def __init__(self, payload: bytes, path: str):
        self.payload = payload
        self.offset = 0
        self.path = path

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.payload):
            raise FormatError(f"{self.path}: truncated while reading {what}")
        chunk = self.payload[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _read_tensor(reader: _Reader) -> np.ndarray:
    dtype_code, ndim = reader.unpack("<BB", "tensor header")
    if dtype_code not in _DTYPE_CODES:
        raise FormatError(f"{reader.path}: unknown dtype code {dtype_code}")
    dims = reader.unpack(f"<{ndim}I", "tensor dims")
    count = int(np.prod(dims)) if dims else 1
    dtype = _DTYPE_CODES[dtype_code]
    raw = reader.take(count * dtype.itemsize, "tensor data")
    return np.frombuffer(raw, dtype=dtype).reshape(dims).copy()


def write_feature_file(record: FeatureRecord, path: str | Path) -> None:
    """Serialize one record bit-exactly; features are stored as float32."""
    chunks = [MAGIC_FEATURES, struct.pack("<HB", FORMAT_VERSION, 2)]
    chunks.append(_pack_tensor(record.stage3, 1))
    chunks.append(_pack_tensor(record.stage4, 1))
    chunks.append(struct.pack("<d", float(record.mos)))
    encoded_id = record.id.encode("utf-8")
    chunks.append(struct.pack("<H", len(encoded_id)) + encoded_id)
    atomic_write_bytes(Path(path), b"".join(chunks))


def read_feature_file(path: str | Path) -> FeatureRecord:
    """Exact inverse of :func:`write_feature_file`."""
    reader = _Reader(Path(path).read_bytes(), str(path))
    magic = reader.take(4, "magic")
    if magic != MAGIC_FEATURES:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC_FEATURES!r}")
    version, count = reader.unpack("<HB", "version/count")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if count != 2:
        raise FormatError(f"{path}: expected 2 tensors, header says {count}")
    stage3 = _read_tensor(reader)
    stage4 = _read_tensor(reader)
    (mos,) = reader.unpack("<d", "mos")
    (id_len,) = reader.unpack("<H", "id length")
    record_id = reader.take(id_len, "id").decode("utf-8")
    if reader.offset != len(reader.payload):
        raise FormatError(f"{path}: {len(reader.payload) - reader.offset} "
                          f"trailing bytes after id")
    return FeatureRecord(id=record_id, stage3=stage3, stage4=stage4, mos=mos)


def feature_file_size(shape3: Sequence[int], shape4: Sequence[int],
                      id_length: int) -> int:
    """Exact byte size of a feature file from the layout arithmetic."""
    def tensor_bytes(shape):
        return 1 + 1 + 4 * len(shape) + 4 * int(np.prod(shape))

    return 4 + 2 + 1 + tensor_bytes(shape3) + tensor_bytes(shape4) + 8 + 2 + id_length


# -- splits ----------------------------------------------------------------------


def split(manifest: Manifest, spec: SplitSpec) -> tuple[list[str], list[str]]:
    """Deterministic shuffle keyed by (seed, run_index); first 80% train."""
    ids = manifest.ids()
    if len(ids) < 2:
        raise ValueError(f"need at least 2 records to split, got {len(ids)}")
    rng = np.random.default_rng([spec.seed, spec.run_index])
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    train_size = math.floor(spec.train_fraction * len(ids))
    return shuffled[:train_size], shuffled[train_size:]


# -- synthetic data ----------------------------------------------------------------


def planted_score(stage3: np.ndarray, stage4: np.ndarray) -> float:
    """Deterministic label: 50 + 25*tanh(a*m4 + b*m3 + c*m4^2) on map means."""
    m3 = float(np.asarray(stage3, dtype=np.float64).mean())
    m4 = float(np.asarray(stage4, dtype=np.float64).mean())
    return 50.0 + 25.0 * math.tanh(PLANTED_A * m4 + PLANTED_B * m3 + PLANTED_C * m4 * m4)


def synth_generate(count: int, seed: int, dims: tuple[tuple[int, int, int],
                                                      tuple[int, int, int]],
                   out_dir: str | Path) -> Manifest:
    """Write ``count`` noise-free synthetic records plus a manifest.

    Feature tensors are drawn from a seeded unit Gaussian; the label is the
    planted score of the stored (float32) tensors so that reading a file and
    recomputing the score reproduces the label exactly.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    shape3, shape4 = tuple(dims[0]), tuple(dims[1])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for index in range(count):
        rng = np.random.default_rng([seed, index])
        stage3 = rng.standard_normal(shape3).astype(np.float32)
        stage4 = rng.standard_normal(shape4).astype(np.float32)
        record = FeatureRecord(
            id=f"synth-{seed:04d}-{index:05d}",
            stage3=stage3,
            stage4=stage4,
            mos=planted_score(stage3, stage4),
        )
        filename = f"{record.id}.lifq"
        write_feature_file(record, out_dir / filename)
        records.append({"id": record.id, "path": filename, "mos": record.mos})
    manifest = Manifest(
        version=FORMAT_VERSION,
        records=records,
        metadata={
            "generator": "synth",
            "seed": seed,
            "dims": {"stage3": list(shape3), "stage4": list(shape4)},
            "planted": {"a": PLANTED_A, "b": PLANTED_B, "c": PLANTED_C},
        },
    )
    manifest.save(out_dir / "manifest.json")
    return manifest


def load_records(manifest: Manifest, base_dir: str | Path,
                 ids: Iterable[str] | None = None) -> list[FeatureRecord]:
    """Read the records named by ``ids`` (manifest order when omitted)."""
    base_dir = Path(base_dir)
    by_id = {r["id"]: r for r in manifest.records}
    wanted = list(ids) if ids is not None else manifest.ids()
    return [read_feature_file(base_dir / by_id[i]["path"]) for i in wanted]


def median_of_runs(values: Sequence[float]) -> float:
    """Standard median; an even count averages the two central values."""
    if len(values) == 0:
        raise ValueError("median of an empty sequence")
    ordered = sorted(float(v) for v in values)
    mid = len(ordered) // 2
    if len(ordered) % 2 == 1:
        return ordered[mid]
    return 0.5 * (ordered[mid - 1] + ordered[mid])


# -- checkpoints --------------------------------------------------------------------


def write_checkpoint(params: Sequence[Parameter], path: str | Path) -> None:
    """Store named parameter tensors; float64 blocks in parameter order."""
    chunks = [MAGIC_CHECKPOINT, struct.pack("<HI", FORMAT_VERSION, len(params))]
    for p in params:
        encoded = p.name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(_pack_tensor(p.data, 2))
    atomic_write_bytes(Path(path), b"".join(chunks))


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    reader = _Reader(Path(path).read_bytes(), str(path))
    magic = reader.take(4, "magic")
    if magic != MAGIC_CHECKPOINT:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC_CHECKPOINT!r}")
    version, count = reader.unpack("<HI", "version/count")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "name length")
        name = reader.take(name_len, "name").decode("utf-8")
        out[name] = _read_tensor(reader)
    if reader.offset != len(reader.payload):
        raise FormatError(f"{path}: trailing bytes after last block")
    return out


def load_checkpoint_into(params: Sequence[Parameter], path: str | Path) -> None:
    blocks = read_checkpoint(path)
    for p in params:
        if p.name not in blocks:
            raise FormatError(f"{path}: checkpoint missing parameter {p.name}")
        p.assign(blocks[p.name])
