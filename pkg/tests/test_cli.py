"""CLI pipeline smoke tests, exit codes, and the run-config schema."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from mnew.cli import main
from mnew.config import (
    ConfigError,
    RunConfig,
    load_run_config,
    run_config_from_dict,
    run_config_to_dict,
)

TINY_MODEL = {
    "model": {
        "layers": [
            {"radii": [[0.8, 4], [1.6, 4]], "ks": [4, 4], "d_conv": 6},
            {"radii": [[1.2, 4], [2.4, 4]], "ks": [4, 4], "d_conv": 6},
            {"radii": [[2.0, 4], [4.0, 4]], "ks": [4, 4], "d_conv": 8},
        ],
        "global_widths": [16, 16],
        "global_fc": [16, 8],
        "head_widths": [16, 8],
    },
    "train": {"epochs": 2, "batch_size": 2},
}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    code = main(
        ["gen", "--out", str(out), "--seed", "5", "--frames-train", "3",
         "--frames-valid", "2", "--points", "256"]
    )
    assert code == 0
    return out


@pytest.fixture(scope="module")
def tiny_config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY_MODEL))
    return path


@pytest.fixture(scope="module")
def trained(dataset, tiny_config_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("model")
    code = main(
        ["train", "--data", str(dataset), "--out", str(out),
         "--config", str(tiny_config_file), "--seed", "3"]
    )
    assert code == 0
    return out


class TestPipeline:
    def test_gen_wrote_manifest_and_frames(self, dataset):
        assert (dataset / "manifest.txt").exists()
        assert (dataset / "train" / "frame_0000.pcl").exists()
        assert (dataset / "valid" / "frame_0004.pcl").exists()

    def test_train_outputs(self, trained):
        assert (trained / "best.ckpt").exists()
        assert (trained / "config.json").exists()
        with open(trained / "train_log.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "train_loss", "valid_OA", "valid_mIoU", "wall_seconds"]
        assert len(rows) == 3

    def test_eval_outputs_and_byte_stability(self, dataset, trained, tmp_path):
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            code = main(
                ["eval", "--data", str(dataset), "--ckpt", str(trained / "best.ckpt"),
                 "--out", str(out)]
            )
            assert code == 0
            for f in ("metrics.csv", "bins_distance.csv", "bins_sparsity.csv",
                      "confusion.csv", "report.png"):
                assert (out / f).exists(), f
            outs.append(out)
        for f in ("metrics.csv", "bins_distance.csv", "bins_sparsity.csv", "confusion.csv"):
            assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()

    def test_metrics_csv_schema(self, dataset, trained, tmp_path):
        out = tmp_path / "r"
        assert main(["eval", "--data", str(dataset), "--ckpt",
                     str(trained / "best.ckpt"), "--out", str(out)]) == 0
        with open(out / "metrics.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["metric", "value"]
        metrics = {r[0]: r[1] for r in rows[1:]}
        assert "oa" in metrics and "miou" in metrics
        assert "iou_ground" in metrics and "iou_car" in metrics
        assert 0.0 <= float(metrics["oa"]) <= 1.0

    def test_confusion_csv_shape(self, dataset, trained, tmp_path):
        out = tmp_path / "r"
        assert main(["eval", "--data", str(dataset), "--ckpt",
                     str(trained / "best.ckpt"), "--out", str(out)]) == 0
        with open(out / "confusion.csv") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 6 and len(rows[0]) == 6  # header + 5 classes
        total = sum(int(v) for row in rows[1:] for v in row[1:])
        assert total == 2 * 256  # valid split: 2 frames

    def test_profile_partition_law(self, dataset, tmp_path):
        out = tmp_path / "p"
        assert main(["profile", "--data", str(dataset), "--out", str(out)]) == 0
        total_points = 5 * 256
        for name in ("distance_hist.csv", "sparsity_hist.csv"):
            with open(out / name) as fh:
                rows = list(csv.reader(fh))
            assert rows[0] == ["bin_lower", "count"]
            assert sum(int(r[1]) for r in rows[1:]) == total_points

    def test_ablate_produces_six_rows(self, dataset, tiny_config_file, tmp_path):
        out = tmp_path / "a"
        code = main(
            ["ablate", "--data", str(dataset), "--out", str(out),
             "--config", str(tiny_config_file), "--seeds", "0", "--epochs", "1"]
        )
        assert code == 0
        with open(out / "ablation.csv") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 7
        names = [r[0] for r in rows[1:]]
        assert names == ["geo", "feat", "geo+feat", "geo+feat+att",
                         "geo+feat+sparsity", "full"]
        assert all(r[8] == "" for r in rows[1:])  # no per-row errors


class TestExitCodes:
    def test_unknown_flag(self, tmp_path, capsys):
        assert main(["gen", "--out", str(tmp_path / "x"), "--bogus"]) == 1
        assert not (tmp_path / "x").exists()  # no partial output
        assert "usage" in capsys.readouterr().err.lower()

    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 1

    def test_missing_required_flag(self, capsys):
        assert main(["train", "--data", "somewhere"]) == 1

    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        assert "gen" in capsys.readouterr().out

    def test_runtime_failure_is_exit_two(self, tmp_path, capsys):
        assert main(["eval", "--data", str(tmp_path / "nope"),
                     "--ckpt", str(tmp_path / "nope.ckpt"),
                     "--out", str(tmp_path / "o")]) == 2
        assert "error" in capsys.readouterr().err.lower()

    def test_full_model_row_matches_plain_training_config(self):
        from mnew.ablation import ABLATION_ROWS
        from mnew.layer import AblationSwitches
        from mnew.network import ModelConfig, config_hash
        from dataclasses import replace

        base = ModelConfig()
        full_switches = dict(ABLATION_ROWS)["full"]
        assert config_hash(replace(base, switches=full_switches)) == config_hash(base)
        assert full_switches == AblationSwitches()


class TestRunConfig:
    def test_defaults_round_trip(self):
        cfg = RunConfig()
        again = run_config_from_dict(run_config_to_dict(cfg))
        assert again.model == cfg.model
        assert again.train == cfg.train
        assert again.eval == cfg.eval

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="unknown config key.*typo"):
            run_config_from_dict({"typo": {}})

    def test_unknown_nested_keys(self):
        with pytest.raises(ConfigError, match="train: epoch$"):
            run_config_from_dict({"train": {"epoch": 3}})
        with pytest.raises(ConfigError, match="model"):
            run_config_from_dict({"model": {"n_points": 64}})
        with pytest.raises(ConfigError, match="layers\\[0\\]"):
            run_config_from_dict(
                {"model": {"layers": [{"radius": 1}, {}, {}]}}
            )

    def test_file_loading(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"train": {"epochs": 7}}))
        cfg = load_run_config(path)
        assert cfg.train.epochs == 7

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError, match="invalid JSON"):
            load_run_config(path)
