import json
import os

import numpy as np
import pytest

from approxdbn import cli

from conftest import write_idx_pair


@pytest.fixture
def workspace(tmp_path):
    """Tiny synthetic IDX dataset plus a config file wired for fast runs."""
    rng = np.random.default_rng(0)
    n = 120
    labels = rng.integers(0, 4, n, dtype=np.uint8)
    images = np.zeros((n, 784), dtype=np.uint8)
    # embed the label as a bright block so the task is learnable
    for i, y in enumerate(labels):
        images[i, y * 50:y * 50 + 40] = 255
    images[:, 400:] = rng.integers(0, 120, (n, 384), dtype=np.uint8)
    write_idx_pair(images, labels, tmp_path / "imgs", tmp_path / "lbls")
    write_idx_pair(images[:40], labels[:40], tmp_path / "test_imgs",
                   tmp_path / "test_lbls")
    config = {
        "train_images": str(tmp_path / "imgs"),
        "train_labels": str(tmp_path / "lbls"),
        "test_images": str(tmp_path / "test_imgs"),
        "test_labels": str(tmp_path / "test_lbls"),
        "hidden_sizes": [8, 6],
        "validation_fraction": 0.25,
        "seed": 3,
        "out_dir": str(tmp_path / "out"),
        "train": {"epochs": 3, "batch_size": 30},
        "search": {"max_relative_accuracy_loss": 0.5, "retrain_epochs": 1},
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(config))
    return tmp_path, cfg_path, config


def write_config(path, config):
    path.write_text(json.dumps(config))


class TestTrainCommand:
    def test_success(self, workspace):
        tmp, cfg, config = workspace
        assert cli.main(["train", "--config", str(cfg)]) == 0
        assert os.path.exists(tmp / "out" / "model.bin")
        assert os.path.exists(tmp / "out" / "training_summary.json")
        assert os.path.exists(tmp / "out" / "config_echo.json")

    def test_deterministic_model_files(self, workspace):
        tmp, cfg, config = workspace
        assert cli.main(["train", "--config", str(cfg)]) == 0
        first = (tmp / "out" / "model.bin").read_bytes()
        assert cli.main(["train", "--config", str(cfg),
                         "--out", str(tmp / "out2")]) == 0
        assert (tmp / "out2" / "model.bin").read_bytes() == first

    def test_missing_labels_file(self, workspace):
        tmp, cfg, config = workspace
        config["train_labels"] = str(tmp / "nope")
        write_config(cfg, config)
        assert cli.main(["train", "--config", str(cfg)]) == cli.EXIT_DATA

    def test_unknown_config_key_rejected(self, workspace):
        tmp, cfg, config = workspace
        config["typo_key"] = 1
        write_config(cfg, config)
        assert cli.main(["train", "--config", str(cfg)]) == cli.EXIT_CONFIG

    def test_unknown_nested_key_rejected(self, workspace):
        tmp, cfg, config = workspace
        config["train"]["nope"] = 1
        write_config(cfg, config)
        assert cli.main(["train", "--config", str(cfg)]) == cli.EXIT_CONFIG

    def test_invalid_json(self, workspace):
        tmp, cfg, _ = workspace
        cfg.write_text("{not json")
        assert cli.main(["train", "--config", str(cfg)]) == cli.EXIT_CONFIG

    def test_unwritable_out_dir(self, workspace):
        tmp, cfg, config = workspace
        blocker = tmp / "blocked"
        blocker.write_text("a file, not a directory")
        config["out_dir"] = str(blocker)
        write_config(cfg, config)
        assert cli.main(["train", "--config", str(cfg)]) == cli.EXIT_CONFIG


@pytest.fixture
def trained(workspace):
    tmp, cfg, config = workspace
    assert cli.main(["train", "--config", str(cfg)]) == 0
    return tmp, cfg, config, str(tmp / "out" / "model.bin")


class TestSearchCommand:
    def test_success_and_artifacts(self, trained):
        tmp, cfg, config, model = trained
        out = tmp / "search_out"
        assert cli.main(["search", "--config", str(cfg), "--model", model,
                         "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["relative_accuracy"] >= 1 - 0.5
        assert (out / "trace.ndjson").exists()
        assert (out / "final_model.bin").exists()
        hist = json.loads((out / "bit_histogram.json").read_text())
        assert sum(h["neuron_count"] for h in hist) == 14

    def test_variant_neither_has_no_retrain_events(self, trained):
        tmp, cfg, config, model = trained
        config["search"]["variant"] = "neither"
        write_config(cfg, config)
        out = tmp / "neither_out"
        assert cli.main(["search", "--config", str(cfg), "--model", model,
                         "--out", str(out)]) == 0
        events = [json.loads(l)["event"]
                  for l in (out / "trace.ndjson").read_text().splitlines()]
        assert "retrain" not in events

    def test_infeasible_constraint_exit_code(self, trained):
        tmp, cfg, config, model = trained
        # a zero-bit starting format forces the constant-class predictor
        config["search"]["baseline_frac_bits"] = 0
        config["search"]["max_relative_accuracy_loss"] = 0.05
        write_config(cfg, config)
        assert cli.main(["search", "--config", str(cfg), "--model", model,
                         "--out", str(tmp / "inf_out")]) == cli.EXIT_INFEASIBLE

    def test_bad_model_file(self, trained):
        tmp, cfg, config, _ = trained
        bad = tmp / "bad.bin"
        bad.write_bytes(b"not a model")
        assert cli.main(["search", "--config", str(cfg), "--model",
                         str(bad)]) == cli.EXIT_DATA


class TestCurveCommand:
    def test_curve_files(self, trained):
        tmp, cfg, config, model = trained
        config["curve"] = {"orders": ["criticality", "random"],
                           "random_seeds": [0, 1]}
        write_config(cfg, config)
        out = tmp / "curve_out"
        assert cli.main(["curve", "--config", str(cfg), "--model", model,
                         "--out", str(out)]) == 0
        crit = json.loads((out / "curve_criticality.json").read_text())
        assert len(crit["accuracy"]) == 14 + 1
        assert (out / "curve_random_0.json").exists()
        assert (out / "curve_random_1.json").exists()
        mean = json.loads((out / "curve_random_mean.json").read_text())
        r0 = json.loads((out / "curve_random_0.json").read_text())["accuracy"]
        r1 = json.loads((out / "curve_random_1.json").read_text())["accuracy"]
        np.testing.assert_allclose(mean["accuracy"],
                                   (np.array(r0) + np.array(r1)) / 2)


class TestEvalCommand:
    def test_mean_field_repeatable(self, trained, capsys):
        tmp, cfg, config, model = trained
        args = ["eval", "--model", model, "--images", config["test_images"],
                "--labels", config["test_labels"]]
        assert cli.main(args) == 0
        first = capsys.readouterr().out
        assert cli.main(args) == 0
        assert capsys.readouterr().out == first
        assert "accuracy" in first and "confusion" in first

    def test_stochastic_repeatable(self, trained, capsys):
        tmp, cfg, config, model = trained
        args = ["eval", "--model", model, "--images", config["test_images"],
                "--labels", config["test_labels"], "--mode", "stochastic",
                "--samples", "5", "--seed", "11"]
        assert cli.main(args) == 0
        first = capsys.readouterr().out
        assert cli.main(args) == 0
        assert capsys.readouterr().out == first

    def test_missing_model(self, trained):
        tmp, cfg, config, _ = trained
        assert cli.main(["eval", "--model", str(tmp / "missing.bin"),
                         "--images", config["test_images"],
                         "--labels", config["test_labels"]]) == cli.EXIT_DATA
