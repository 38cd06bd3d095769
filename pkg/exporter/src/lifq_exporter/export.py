"""Offline feature export: images + MOS labels in, LIFQ files out.

The input CSV has a header and columns ``id, path, mos``. Each image gets a
seeded random crop (one by default), a forward pass through the backbone,
and one LIFQ file; unreadable images are skipped with a warning and listed
in ``rejects.txt``. The manifest is assembled after a deterministic sort by
record id and carries the backbone's channel widths in its metadata.
"""

from __future__ import annotations

import csv
import json
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .backbone import StageBackbone
from .lifq_format import LifqFormatError, read_record, write_record


@dataclass
class ExportJob:
    csv_path: Path
    out_dir: Path
    backbone: str = "swin_t"
    weights: str = "none"
    crop: int = 224
    seed: int = 0
    crops_per_image: int = 1

    def __post_init__(self):
        self.csv_path = Path(self.csv_path)
        self.out_dir = Path(self.out_dir)
        if self.crop % 32 != 0:
            raise ValueError(f"crop size must be divisible by 32, got {self.crop}")
        if self.crops_per_image < 1:
            raise ValueError("crops_per_image must be >= 1")


@dataclass
class ExportResult:
    manifest_path: Path
    exported: list[str] = field(default_factory=list)
    rejected: list[str] = field(default_factory=list)


def _safe_filename(record_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "-", record_id)


def _load_image(path: Path, crop: int) -> np.ndarray:
    image = Image.open(path).convert("RGB")
    w, h = image.size
    if min(w, h) < crop:
        scale = crop / min(w, h)
        image = image.resize((max(crop, round(w * scale)),
                              max(crop, round(h * scale))), Image.BILINEAR)
    return np.asarray(image, dtype=np.float32) / 255.0


def _random_crop(image: np.ndarray, crop: int,
                 rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape[:2]
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    return image[top:top + crop, left:left + crop]


def export_features(job: ExportJob) -> ExportResult:
    rows = list(csv.DictReader(job.csv_path.open()))
    required = {"id", "path", "mos"}
    if rows and not required <= set(rows[0]):
        raise ValueError(f"CSV must have columns {sorted(required)}, "
                         f"got {sorted(rows[0])}")
    job.out_dir.mkdir(parents=True, exist_ok=True)
    backbone = StageBackbone(job.backbone, weights=job.weights, seed=job.seed)

    records = []
    rejected = []
    for index, row in enumerate(rows):
        source = Path(row["path"])
        if not source.is_absolute():
            source = job.csv_path.parent / source
        try:
            image = _load_image(source, job.crop)
        except Exception as err:  # unreadable image: warn, list, continue
            print(f"warning: skipping {row['id']}: {err}", file=sys.stderr)
            rejected.append(f"{row['id']}\t{source}\t{err}")
            continue
        for crop_index in range(job.crops_per_image):
            record_id = row["id"] if crop_index == 0 \
                else f"{row['id']}.crop{crop_index}"
            rng = np.random.default_rng([job.seed, index, crop_index])
            patch = _random_crop(image, job.crop, rng)
            stage3, stage4 = backbone.extract(patch)
            filename = _safe_filename(record_id) + ".lifq"
            write_record(job.out_dir / filename, record_id, stage3, stage4,
                         float(row["mos"]))
            records.append({"id": record_id, "path": filename,
                            "mos": float(row["mos"])})

    records.sort(key=lambda r: r["id"])
    manifest = {
        "version": 1,
        "records": records,
        "metadata": {
            "generator": "exporter",
            "backbone": job.backbone,
            "weights": job.weights,
            "c3": backbone.c3,
            "c4": backbone.c4,
            "crop": job.crop,
            "seed": job.seed,
            "crops_per_image": job.crops_per_image,
        },
    }
    manifest_path = job.out_dir / "manifest.json"
    _atomic_write(manifest_path,
                  json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if rejected:
        _atomic_write(job.out_dir / "rejects.txt", "\n".join(rejected) + "\n")
    return ExportResult(manifest_path=manifest_path,
                        exported=[r["id"] for r in records], rejected=rejected)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def verify_roundtrip(directory: str | Path) -> list[str]:
    """Re-read every exported file; returns a list of problems (empty = pass).

    Checks header validity, spatial/channel dims against the manifest
    metadata, finiteness of all values, and id/mos consistency.
    """
    directory = Path(directory)
    problems: list[str] = []
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        return [f"missing manifest: {manifest_path}"]
    manifest = json.loads(manifest_path.read_text())
    meta = manifest.get("metadata", {})
    expected_c3, expected_c4 = meta.get("c3"), meta.get("c4")
    crop = meta.get("crop")
    for entry in manifest.get("records", []):
        path = directory / entry["path"]
        try:
            record_id, stage3, stage4, mos = read_record(path)
        except (LifqFormatError, OSError) as err:
            problems.append(f"{entry['path']}: {err}")
            continue
        if record_id != entry["id"]:
            problems.append(f"{entry['path']}: id {record_id!r} != manifest "
                            f"{entry['id']!r}")
        if mos != entry["mos"]:
            problems.append(f"{entry['path']}: mos {mos} != manifest {entry['mos']}")
        for name, tensor, channels, stride in (("stage3", stage3, expected_c3, 16),
                                               ("stage4", stage4, expected_c4, 32)):
            if tensor.ndim != 3:
                problems.append(f"{entry['path']}: {name} has ndim {tensor.ndim}")
                continue
            if channels is not None and tensor.shape[2] != channels:
                problems.append(f"{entry['path']}: {name} channels "
                                f"{tensor.shape[2]} != {channels}")
            if crop is not None and tensor.shape[:2] != (crop // stride,) * 2:
                problems.append(f"{entry['path']}: {name} spatial "
                                f"{tensor.shape[:2]} != "
                                f"{(crop // stride, crop // stride)}")
            if not np.isfinite(tensor).all():
                problems.append(f"{entry['path']}: {name} has non-finite values")
    return problems
