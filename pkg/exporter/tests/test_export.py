import csv
import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from lifq_exporter import (
    ExportJob,
    StageBackbone,
    export_features,
    read_record,
    verify_roundtrip,
)
from lifq_exporter.cli import main

from lifq.data import read_feature_file  # primary-side reader


def make_images(directory: Path, count: int, size=(256, 240), seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        pixels = rng.integers(0, 256, size=(size[1], size[0], 3), dtype=np.uint8)
        path = directory / f"img{i:02d}.png"
        Image.fromarray(pixels).save(path)
        rows.append({"id": f"img{i:02d}", "path": path.name,
                     "mos": round(20.0 + 7.5 * i, 2)})
    csv_path = directory / "labels.csv"
    with csv_path.open("w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=["id", "path", "mos"])
        writer.writeheader()
        writer.writerows(rows)
    return csv_path, rows


@pytest.fixture(scope="module")
def exported(tmp_path_factory):
    base = tmp_path_factory.mktemp("export")
    csv_path, rows = make_images(base / "images", count=6)
    out = base / "features"
    job = ExportJob(csv_path=csv_path, out_dir=out, backbone="swin_t",
                    weights="none", crop=224, seed=0)
    result = export_features(job)
    return csv_path, rows, out, result


class TestAcceptanceRoundTrip:
    """Exporter release criterion: shapes, verification, primary readability."""

    def test_stage_shapes(self, exported):
        _, rows, out, result = exported
        assert len(result.exported) >= 5
        for row in rows:
            record_id, stage3, stage4, _ = read_record(
                out / f"{row['id']}.lifq")
            assert stage3.shape == (14, 14, 384)
            assert stage4.shape == (7, 7, 768)
            assert record_id == row["id"]

    def test_verify_roundtrip_passes(self, exported):
        *_, out, _ = exported
        assert verify_roundtrip(out) == []

    def test_primary_reader_consumes_exports(self, exported):
        _, rows, out, _ = exported
        for row in rows:
            record = read_feature_file(out / f"{row['id']}.lifq")
            assert record.id == row["id"]
            assert record.mos == row["mos"]
            assert record.stage3.shape == (14, 14, 384)
            assert record.stage4.shape == (7, 7, 768)
            assert record.stage3.dtype == np.float32

    def test_manifest_matches_published_widths(self, exported):
        *_, out, _ = exported
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["metadata"]["c3"] == 384
        assert manifest["metadata"]["c4"] == 768
        assert [r["id"] for r in manifest["records"]] == \
            sorted(r["id"] for r in manifest["records"])


class TestDeterminism:
    def test_same_seed_identical_bytes(self, exported, tmp_path):
        csv_path, rows, out, _ = exported
        second = tmp_path / "again"
        export_features(ExportJob(csv_path=csv_path, out_dir=second,
                                  backbone="swin_t", weights="none",
                                  crop=224, seed=0))
        for row in rows:
            name = f"{row['id']}.lifq"
            assert (out / name).read_bytes() == (second / name).read_bytes()
        assert (out / "manifest.json").read_bytes() == \
            (second / "manifest.json").read_bytes()


class TestRejectsAndValidation:
    def test_unreadable_image_listed(self, tmp_path, capsys):
        csv_path, rows = make_images(tmp_path / "images", count=2, seed=1)
        broken = tmp_path / "images" / "broken.png"
        broken.write_bytes(b"this is not an image")
        with csv_path.open("a", newline="") as handle:
            handle.write(f"brk,{broken.name},50.0\n")
        out = tmp_path / "features"
        result = export_features(ExportJob(csv_path=csv_path, out_dir=out,
                                           weights="none"))
        assert len(result.exported) == 2
        assert len(result.rejected) == 1
        assert "brk" in (out / "rejects.txt").read_text()
        assert "skipping brk" in capsys.readouterr().err

    def test_small_image_upscaled_before_crop(self, tmp_path):
        directory = tmp_path / "images"
        directory.mkdir()
        pixels = np.random.default_rng(2).integers(
            0, 256, size=(120, 150, 3), dtype=np.uint8)
        Image.fromarray(pixels).save(directory / "small.png")
        csv_path = directory / "labels.csv"
        csv_path.write_text("id,path,mos\nsmall,small.png,33.0\n")
        out = tmp_path / "features"
        result = export_features(ExportJob(csv_path=csv_path, out_dir=out,
                                           weights="none"))
        assert result.exported == ["small"]
        _, stage3, _, _ = read_record(out / "small.lifq")
        assert stage3.shape == (14, 14, 384)

    def test_crop_must_divide_stride(self, tmp_path):
        with pytest.raises(ValueError, match="divisible by 32"):
            ExportJob(csv_path=tmp_path / "x.csv", out_dir=tmp_path,
                      crop=200)

    def test_crops_per_image(self, tmp_path):
        csv_path, _ = make_images(tmp_path / "images", count=1, seed=3)
        out = tmp_path / "features"
        result = export_features(ExportJob(csv_path=csv_path, out_dir=out,
                                           weights="none", crops_per_image=3))
        assert sorted(result.exported) == \
            ["img00", "img00.crop1", "img00.crop2"]
        ids = {read_record(out / f)[0] for f in
               ("img00.lifq", "img00.crop1.lifq", "img00.crop2.lifq")}
        assert len(ids) == 3


class TestVerifyFailures:
    def test_truncated_file_fails(self, exported, tmp_path):
        csv_path, rows, out, _ = exported
        copy = tmp_path / "copy"
        copy.mkdir()
        for path in out.iterdir():
            (copy / path.name).write_bytes(path.read_bytes())
        victim = copy / f"{rows[0]['id']}.lifq"
        victim.write_bytes(victim.read_bytes()[:100])
        problems = verify_roundtrip(copy)
        assert any(rows[0]["id"] in p for p in problems)

    def test_dim_edited_header_fails(self, exported, tmp_path):
        csv_path, rows, out, _ = exported
        copy = tmp_path / "copy"
        copy.mkdir()
        for path in out.iterdir():
            (copy / path.name).write_bytes(path.read_bytes())
        victim = copy / f"{rows[0]['id']}.lifq"
        payload = bytearray(victim.read_bytes())
        payload[9] = 13  # first dim of the stage3 tensor (offset 7+2)
        victim.write_bytes(bytes(payload))
        assert verify_roundtrip(copy) != []

    def test_missing_manifest(self, tmp_path):
        assert verify_roundtrip(tmp_path) != []


class TestCli:
    def test_run_and_verify(self, tmp_path, capsys):
        csv_path, _ = make_images(tmp_path / "images", count=2, seed=4)
        out = tmp_path / "features"
        assert main(["run", "--csv", str(csv_path), "--out", str(out),
                     "--weights", "none"]) == 0
        assert "exported 2 records" in capsys.readouterr().out
        assert main(["verify", "--dir", str(out)]) == 0

    def test_missing_csv_exit_2(self, tmp_path):
        assert main(["run", "--csv", str(tmp_path / "nope.csv"),
                     "--out", str(tmp_path / "o")]) == 2

    def test_verify_failure_exit_1(self, tmp_path):
        assert main(["verify", "--dir", str(tmp_path)]) == 1
