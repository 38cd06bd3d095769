import json
from pathlib import Path

import numpy as np
import pytest

import lifq.decoder
from lifq.cli import main
from lifq.data import median_of_runs
from lifq.tensor import Tensor

TINY_CONFIG = {
    "model": {
        "decoder": {"num_layers": 1, "num_queries": 3, "embed_dim": 8,
                    "num_heads": 2, "ffn_hidden": 5, "grid_side": 2},
        "moe": {"num_experts": 3, "top_k": 2, "expert_hidden": 5},
    },
    "train": {"learning_rate": 1e-3, "epochs": 2, "batch_size": 6, "seed": 0},
}


def write_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return str(path)


def make_dataset(tmp_path, count=12, seed=0):
    out = tmp_path / "data"
    code = main(["synth", "--count", str(count), "--seed", str(seed),
                 "--dims", "6x6x4,3x3x8", "--out", str(out)])
    assert code == 0
    return out


class TestSynth:
    def test_count_contract(self, tmp_path):
        out = make_dataset(tmp_path, count=16)
        files = sorted(p.name for p in out.glob("*.lifq"))
        assert len(files) == 16
        assert (out / "manifest.json").is_file()
        assert (out / "config.json").is_file()

    def test_repeat_invocation_identical_bytes(self, tmp_path):
        # The config echo records the differing --out flag, so compare the
        # dataset payload: feature files and the manifest.
        first = make_dataset(tmp_path / "a", count=5, seed=9)
        second = make_dataset(tmp_path / "b", count=5, seed=9)
        names = sorted(p.name for p in first.glob("*.lifq"))
        assert len(names) == 5
        for name in names + ["manifest.json"]:
            assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_zero_count_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            main(["synth", "--count", "0", "--out", str(tmp_path / "x")])
        assert err.value.code == 2

    def test_bad_dims_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            main(["synth", "--count", "2", "--dims", "6x6", "--out",
                  str(tmp_path / "x")])
        assert err.value.code == 2

    def test_unknown_flag_rejected(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            main(["synth", "--count", "2", "--out", str(tmp_path), "--bogus"])
        assert err.value.code == 2


class TestTrain:
    def test_train_writes_artifacts(self, tmp_path):
        data = make_dataset(tmp_path)
        out = tmp_path / "run0"
        code = main(["train", "--manifest", str(data / "manifest.json"),
                     "--split-seed", "1", "--run", "0",
                     "--config", write_config(tmp_path), "--out", str(out)])
        assert code == 0
        assert (out / "log.csv").is_file()
        assert (out / "checkpoint.lifc").is_file()
        assert (out / "config.json").is_file()
        metrics = json.loads((out / "metrics.json").read_text())
        assert {"srocc", "plcc", "runs", "median_srocc", "median_plcc"} <= \
            set(metrics)

    def test_missing_manifest_exit_2(self, tmp_path):
        code = main(["train", "--manifest", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "out")])
        assert code == 2

    def test_byte_identical_reruns(self, tmp_path):
        data = make_dataset(tmp_path)
        config = write_config(tmp_path)
        outputs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            code = main(["train", "--manifest", str(data / "manifest.json"),
                         "--split-seed", "3", "--run", "1",
                         "--config", config, "--out", str(out)])
            assert code == 0
            outputs.append(out)
        for artifact in ("log.csv", "checkpoint.lifc", "metrics.json"):
            assert (outputs[0] / artifact).read_bytes() == \
                (outputs[1] / artifact).read_bytes()

    def test_eval_roundtrip_matches_train_metrics(self, tmp_path):
        data = make_dataset(tmp_path)
        config = write_config(tmp_path)
        out = tmp_path / "run"
        main(["train", "--manifest", str(data / "manifest.json"),
              "--split-seed", "2", "--run", "0", "--config", config,
              "--out", str(out)])
        eval_out = tmp_path / "eval"
        code = main(["eval", "--manifest", str(data / "manifest.json"),
                     "--checkpoint", str(out / "checkpoint.lifc"),
                     "--split-seed", "2", "--run", "0", "--config", config,
                     "--out", str(eval_out)])
        assert code == 0
        trained = json.loads((out / "metrics.json").read_text())
        evaluated = json.loads((eval_out / "metrics.json").read_text())
        assert evaluated["srocc"] == pytest.approx(trained["srocc"])
        assert evaluated["plcc"] == pytest.approx(trained["plcc"])


class TestExportMetrics:
    def test_median_matches_helper(self, tmp_path):
        paths = []
        sroccs = [0.91, 0.85, 0.97, 0.88]
        plccs = [0.90, 0.84, 0.96, 0.89]
        for run, (s, p) in enumerate(zip(sroccs, plccs)):
            path = tmp_path / f"metrics{run}.json"
            path.write_text(json.dumps(
                {"runs": [{"run": run, "srocc": s, "plcc": p}]}))
            paths.append(str(path))
        out = tmp_path / "combined.json"
        code = main(["export-metrics", "--runs", *paths, "--out", str(out)])
        assert code == 0
        combined = json.loads(out.read_text())
        assert combined["median_srocc"] == pytest.approx(median_of_runs(sroccs))
        assert combined["median_plcc"] == pytest.approx(median_of_runs(plccs))
        assert len(combined["runs"]) == 4


class TestGradcheckCommand:
    def test_pass_exit_zero(self, capsys):
        assert main(["gradcheck", "--seed", "0"]) == 0
        out = capsys.readouterr().out
        assert out.count("pass") >= 12
        assert "FAIL" not in out

    def test_seed_reproducible_output(self, capsys):
        main(["gradcheck", "--seed", "4"])
        first = capsys.readouterr().out
        main(["gradcheck", "--seed", "4"])
        second = capsys.readouterr().out
        assert first == second

    def test_wrong_sign_backward_fails(self, monkeypatch, capsys):
        real_relu = lifq.decoder.relu

        def wrong_relu(a):
            out = real_relu(a)
            active = a.data > 0

            def _bw(g):
                if a.requires_grad:
                    a.grad -= 2.0 * g * active  # net effect: sign flip

            out._backward = _bw
            return out

        monkeypatch.setattr(lifq.decoder, "relu", wrong_relu)
        assert main(["gradcheck", "--seed", "0"]) == 1
        assert "FAIL" in capsys.readouterr().out


class TestParamsCommand:
    def test_default_table(self, capsys):
        assert main(["params"]) == 0
        out = capsys.readouterr().out
        assert "1,577,728" in out
        assert "4,726,272" in out
        assert "1.58" in out
        assert "4.73" in out

    def test_two_experts(self, capsys):
        main(["params", "--experts", "2"])
        out = capsys.readouterr().out
        assert "2,363,136" in out
        assert "2.36" in out

    def test_eight_experts(self, capsys):
        main(["params", "--experts", "8"])
        out = capsys.readouterr().out
        assert "9,452,544" in out
