import json

import numpy as np
import pytest

from protohead.cli import main
from protohead.dataio import read_bundle

SMALL_CONFIG = {
    "synth": {
        "num_classes": 3,
        "samples_per_class": 10,
        "grid_h": 6,
        "grid_w": 6,
        "embed_dim": 16,
        "num_part_categories": 2,
        "styles_per_category": 2,
        "noise_std": 0.05,
        "seed": 2,
        "part_extent_min": 2,
        "part_extent_max": 2,
    },
    "head": {
        "embed_dim": 16,
        "proj_dim": 12,
        "num_prototypes": 8,
        "num_classes": 3,
        "top_k": 3,
        "align_grid": 3,
    },
    "train": {"batch_size": 8, "epochs": 3, "warmup_epochs": 1, "seed": 0},
    "metrics": {"max_samples": 10, "seed": 0},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(SMALL_CONFIG))
    data = root / "data.peb"
    assert main(["gen-synth", "--out", str(data), "--config", str(cfg_path)]) == 0
    run_dir = root / "run"
    assert (
        main(
            [
                "train",
                "--data",
                str(data),
                "--config",
                str(cfg_path),
                "--out",
                str(run_dir),
            ]
        )
        == 0
    )
    return root, cfg_path, data, run_dir


class TestGenSynth:
    def test_same_seed_identical_files(self, tmp_path, workspace):
        _, cfg_path, _, _ = workspace
        a, b = tmp_path / "a.peb", tmp_path / "b.peb"
        assert main(["gen-synth", "--out", str(a), "--config", str(cfg_path)]) == 0
        assert main(["gen-synth", "--out", str(b), "--config", str(cfg_path)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_seed_override_changes_file(self, tmp_path, workspace):
        _, cfg_path, data, _ = workspace
        other = tmp_path / "other.peb"
        assert (
            main(
                ["gen-synth", "--out", str(other), "--config", str(cfg_path), "--seed", "99"]
            )
            == 0
        )
        assert other.read_bytes() != data.read_bytes()

    def test_default_config_writes_thousand_samples(self, tmp_path, capsys):
        out = tmp_path / "default.peb"
        assert main(["gen-synth", "--out", str(out)]) == 0
        assert "1000 samples" in capsys.readouterr().out
        assert read_bundle(out).num_samples == 1000

    def test_invalid_category_count_exits_2(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"synth": {"num_part_categories": 1}}))
        assert main(["gen-synth", "--out", str(tmp_path / "x.peb"), "--config", str(cfg)]) == 2

    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"synth": {"banana": 3}}))
        assert main(["gen-synth", "--out", str(tmp_path / "x.peb"), "--config", str(cfg)]) == 2

    def test_unknown_section_rejected(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"snyth": {}}))
        assert main(["gen-synth", "--out", str(tmp_path / "x.peb"), "--config", str(cfg)]) == 2


class TestTrain:
    def test_missing_data_exits_3(self, tmp_path, workspace):
        _, cfg_path, _, _ = workspace
        code = main(
            ["train", "--data", str(tmp_path / "nope.peb"), "--config", str(cfg_path),
             "--out", str(tmp_path / "o")]
        )
        assert code == 3

    def test_all_zero_weights_exit_2(self, tmp_path, workspace):
        _, _, data, _ = workspace
        cfg = dict(SMALL_CONFIG)
        cfg["loss"] = {
            "lambda_assign": 0, "lambda_align": 0, "lambda_contrast": 0,
            "lambda_sparsity": 0, "lambda_classify": 0,
        }
        cfg_path = tmp_path / "zero.json"
        cfg_path.write_text(json.dumps(cfg))
        code = main(
            ["train", "--data", str(data), "--config", str(cfg_path), "--out", str(tmp_path / "o")]
        )
        assert code == 2

    def test_deterministic_rerun(self, tmp_path, workspace):
        _, cfg_path, data, run_dir = workspace
        second = tmp_path / "again"
        assert (
            main(["train", "--data", str(data), "--config", str(cfg_path), "--out", str(second)])
            == 0
        )
        assert (run_dir / "train_log.jsonl").read_bytes() == (
            second / "train_log.jsonl"
        ).read_bytes()
        assert (run_dir / "checkpoint.phc").read_bytes() == (
            second / "checkpoint.phc"
        ).read_bytes()


class TestEvalExplainMetrics:
    def test_eval_prints_accuracy(self, workspace, capsys):
        _, _, data, run_dir = workspace
        assert main(["eval", "--data", str(data), "--ckpt", str(run_dir / "checkpoint.phc")]) == 0
        out = capsys.readouterr().out
        assert "accuracy" in out

    def test_explain_full_k_gives_sec_one(self, tmp_path, workspace):
        _, _, data, run_dir = workspace
        out_dir = tmp_path / "sheets"
        assert (
            main(
                ["explain", "--data", str(data), "--ckpt", str(run_dir / "checkpoint.phc"),
                 "--top-k", "400", "--samples", "6", "--out", str(out_dir)]
            )
            == 0
        )
        sheets = sorted(out_dir.glob("sheet_*.json"))
        assert len(sheets) == 6
        for sheet in sheets:
            payload = json.loads(sheet.read_text())
            assert payload["sec"] == pytest.approx(1.0)
        assert list(out_dir.glob("*.pgm"))

    def test_metrics_report_schema(self, tmp_path, workspace):
        root, cfg_path, data, run_dir = workspace
        report_path = tmp_path / "report.json"
        assert (
            main(
                ["metrics", "--data", str(data), "--ckpt", str(run_dir / "checkpoint.phc"),
                 "--suite", "all", "--config", str(cfg_path), "--out", str(report_path)]
            )
            == 0
        )
        report = json.loads(report_path.read_text())
        for key in (
            "accuracy", "csdc", "pc", "dc", "distractibility", "sd", "ts", "bi",
            "mean_explainability", "consistency", "stability",
            "local_size", "global_size", "config", "notes",
        ):
            assert key in report
        for key in ("csdc", "pc", "dc", "distractibility", "sd", "ts", "bi"):
            assert 0.0 <= report[key] <= 1.0

    def test_bad_checkpoint_path_exits_3(self, tmp_path, workspace):
        _, _, data, _ = workspace
        assert main(["eval", "--data", str(data), "--ckpt", str(tmp_path / "no.phc")]) == 3
