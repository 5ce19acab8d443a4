"""Tests for the command-line surface."""

import json

import pytest

from fedmerge.cli import main
from fedmerge.datasets import load_idx
from fedmerge.harness import ExperimentConfig, load_metrics
from fedmerge.merging import MergeConfig
from fedmerge.mlp import ModelSpec


def small_config_dict(**overrides):
    cfg = ExperimentConfig(
        dataset="synthetic",
        synthetic_samples=400,
        synthetic_test_samples=100,
        model=ModelSpec(8, (16,), 4, "relu"),
        num_clients=6,
        rounds=5,
        local_epochs=1,
        batch_size=16,
        eta_l=0.2,
        classes_per_client=2,
        merge=MergeConfig(merge_rounds=(3,)),
        seeds=(1,),
    )
    d = cfg.to_dict()
    d.update(overrides)
    return d


def write_config(tmp_path, **overrides):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(small_config_dict(**overrides)))
    return path


def test_run_writes_metrics_and_reports(tmp_path, capsys):
    cfg = write_config(tmp_path)
    code = main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")])
    assert code == 0
    out = capsys.readouterr().out
    assert "final accuracy" in out
    run_dirs = list((tmp_path / "out").iterdir())
    assert len(run_dirs) == 1
    rows = load_metrics(run_dirs[0] / "metrics.csv")
    assert len(rows) == 5
    assert (run_dirs[0] / "manifest.json").exists()


def test_run_flag_overrides(tmp_path):
    cfg = write_config(tmp_path)
    code = main(
        [
            "run",
            "--config",
            str(cfg),
            "--seed",
            "9",
            "--rounds",
            "4",
            "--condition",
            "poisoning",
            "--out",
            str(tmp_path / "out"),
        ]
    )
    assert code == 0
    run_dirs = list((tmp_path / "out").iterdir())
    rows = load_metrics(run_dirs[0] / "metrics.csv")
    assert len(rows) == 4
    assert all(r.seed == 9 for r in rows)
    assert all(r.condition == "poisoning" for r in rows)


def test_run_rejects_bad_config(tmp_path, capsys):
    path = tmp_path / "config.json"
    d = small_config_dict()
    d["typo_key"] = 1
    path.write_text(json.dumps(d))
    code = main(["run", "--config", str(path)])
    assert code == 2
    assert "config error" in capsys.readouterr().err


def test_run_missing_config_file(tmp_path):
    assert main(["run", "--config", str(tmp_path / "absent.json")]) == 2


def test_run_missing_mnist_data(tmp_path, capsys):
    cfg = write_config(
        tmp_path,
        dataset="mnist",
        data_dir=str(tmp_path / "nodata"),
        model={"input_dim": 784, "hidden_dims": [16], "num_classes": 10, "activation": "relu"},
        classes_per_client=8,
    )
    code = main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")])
    assert code == 3
    assert "data error" in capsys.readouterr().err


def test_compare_prints_summary(tmp_path, capsys):
    cfg = write_config(tmp_path)
    code = main(
        [
            "compare",
            "--config",
            str(cfg),
            "--conditions",
            "normal,poisoning",
            "--seeds",
            "1,2",
            "--out",
            str(tmp_path / "cmp"),
        ]
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "scaffold_merge" in out and "scaffold" in out
    assert (tmp_path / "cmp" / "summary.csv").exists()
    assert (tmp_path / "cmp" / "summary.txt").exists()


def test_compare_rejects_unknown_condition(tmp_path, capsys):
    cfg = write_config(tmp_path)
    code = main(["compare", "--config", str(cfg), "--conditions", "normal,snowstorm"])
    assert code == 2
    assert "snowstorm" in capsys.readouterr().err


def test_gen_data_then_train_on_it(tmp_path, capsys):
    data_dir = tmp_path / "data"
    code = main(
        [
            "gen-data",
            "--out",
            str(data_dir),
            "--n",
            "400",
            "--n-test",
            "80",
            "--classes",
            "4",
            "--dim",
            "8",
            "--seed",
            "3",
        ]
    )
    assert code == 0
    train = load_idx(data_dir / "train-images-idx3-ubyte", data_dir / "train-labels-idx1-ubyte")
    test = load_idx(data_dir / "t10k-images-idx3-ubyte", data_dir / "t10k-labels-idx1-ubyte")
    assert train.inputs.shape == (400, 8)
    assert test.inputs.shape == (80, 8)
    assert train.num_classes == 4

    cfg = write_config(
        tmp_path,
        dataset="mnist",
        data_dir=str(data_dir),
        model={"input_dim": 8, "hidden_dims": [16], "num_classes": 4, "activation": "relu"},
    )
    code = main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")])
    assert code == 0
    run_dirs = list((tmp_path / "out").iterdir())
    rows = load_metrics(run_dirs[0] / "metrics.csv")
    assert len(rows) == 5


def test_gen_data_rejects_nonsense(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--n", "0"]) == 2


def test_check_passes(capsys):
    code = main(["check"])
    out = capsys.readouterr().out
    assert code == 0
    assert out.count("[PASS]") == 4
    assert "[FAIL]" not in out


def test_bad_log_level_warns_but_runs(monkeypatch, capsys):
    monkeypatch.setenv("FEDMERGE_LOG", "chatty")
    code = main(["check"])
    captured = capsys.readouterr()
    assert code == 0
    assert "FEDMERGE_LOG" in captured.err
