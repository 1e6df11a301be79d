import csv
import json
from pathlib import Path

import numpy as np
import pytest

from debiaskit.runner import (ConfigError, RunConfig, aggregate_report,
                              run_experiment, run_sweep, summarize)


def _tiny_cfg(tmp_path, **over):
    d = {
        "schema_version": 1,
        "scheme": "oracle-ub",
        "method": "LW",
        "dataset": {"num_classes": 4, "n": 400, "bc_ratio": 0.1, "seed": 5},
        "test_n": 300,
        "train": {"epochs": 2, "batch_size": 64, "hidden": [16]},
        "out_dir": str(tmp_path / "run"),
        "seeds": [0, 1],
    }
    d.update(over)
    return RunConfig.from_dict(d)


def test_schema_version_required(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"scheme": "vanilla"})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"schema_version": 2, "dataset": {"n": 10}})


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError):
        _tiny_cfg(tmp_path, gama=3.0)
    with pytest.raises(ConfigError):
        _tiny_cfg(tmp_path, dataset={"num_classes": 4, "n": 10, "bc_ratio": 0.1,
                                     "rho": 0.1})
    with pytest.raises(ConfigError):
        _tiny_cfg(tmp_path, train={"epochs": 2, "learning_rate": 0.1})


def test_config_roundtrip(tmp_path):
    cfg = _tiny_cfg(tmp_path, gamma=50.0, anneal={"w_init": 2.0, "t_anneal": 10})
    back = RunConfig.from_dict(cfg.to_dict())
    assert back == cfg


def test_needs_dataset():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"schema_version": 1})


def test_run_experiment_artifacts(tmp_path):
    cfg = _tiny_cfg(tmp_path)
    summary = run_experiment(cfg)
    out = Path(cfg.out_dir)
    with (out / "metrics.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == cfg.train.epochs * len(cfg.seeds)  # epochs x seeds
    assert set(rows[0]) == {"seed", "epoch", "train_loss", "test_acc",
                            "test_acc_ba", "test_acc_bc", "beta"}
    assert (out / "summary.json").exists()
    assert (out / "timings.json").exists()
    assert (out / "weights_seed0.csv").exists()
    assert (out / "checkpoint_seed0" / "params.f64le").exists()
    assert summary["n_seeds"] == 2


def test_summary_reproducible_from_csv(tmp_path):
    cfg = _tiny_cfg(tmp_path)
    summary = run_experiment(cfg)
    recomputed = aggregate_report(cfg.out_dir)
    for key, stats in summary["metrics"].items():
        assert abs(stats["mean"] - recomputed["metrics"][key]["mean"]) < 1e-12
        assert abs(stats["std"] - recomputed["metrics"][key]["std"]) < 1e-12


def test_run_experiment_deterministic(tmp_path):
    cfg_a = _tiny_cfg(tmp_path / "a")
    cfg_b = _tiny_cfg(tmp_path / "b")
    run_experiment(cfg_a)
    run_experiment(cfg_b)
    a = (Path(cfg_a.out_dir) / "metrics.csv").read_bytes()
    b = (Path(cfg_b.out_dir) / "metrics.csv").read_bytes()
    assert a == b
    wa = (Path(cfg_a.out_dir) / "weights_seed0.csv").read_bytes()
    wb = (Path(cfg_b.out_dir) / "weights_seed0.csv").read_bytes()
    assert wa == wb


def test_weights_csv_schema(tmp_path):
    cfg = _tiny_cfg(tmp_path)
    run_experiment(cfg)
    with (Path(cfg.out_dir) / "weights_seed0.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["index", "weight", "aligned", "provenance"]
    assert rows[0]["provenance"] == "oracle-ub"
    assert len(rows) == 400


def test_sweep_singleton_matches_run_experiment(tmp_path):
    cfg = _tiny_cfg(tmp_path, scheme="biased-confidence", gamma=20.0, t_bias=1)
    path = run_sweep(cfg, "gamma", [20.0])
    with path.open() as fh:
        sweep_rows = list(csv.DictReader(fh))
    single = _tiny_cfg(tmp_path / "single", scheme="biased-confidence",
                       gamma=20.0, t_bias=1)
    run_experiment(single)
    with (Path(single.out_dir) / "metrics.csv").open() as fh:
        exp_rows = list(csv.DictReader(fh))
    assert len(sweep_rows) == len(exp_rows)
    for s, e in zip(sweep_rows, exp_rows):
        assert s["test_acc"] == e["test_acc"]
        assert s["value"] == "20"


def test_sweep_axis_validation(tmp_path):
    cfg = _tiny_cfg(tmp_path)
    with pytest.raises(ConfigError):
        run_sweep(cfg, "epochs", [1.0])
    with pytest.raises(ConfigError):
        run_sweep(cfg, "gamma", [])


def test_sweep_parallel_matches_serial(tmp_path):
    cfg_s = _tiny_cfg(tmp_path / "serial", scheme="oracle-ub")
    cfg_p = _tiny_cfg(tmp_path / "parallel", scheme="oracle-ub")
    a = run_sweep(cfg_s, "gamma", [10.0, 20.0], jobs=1)
    b = run_sweep(cfg_p, "gamma", [10.0, 20.0], jobs=2)
    assert a.read_bytes() == b.read_bytes()


def test_sweep_t_bias_axis(tmp_path):
    cfg = _tiny_cfg(tmp_path, scheme="biased-confidence", gamma=20.0,
                    seeds=[0])
    path = run_sweep(cfg, "t_bias", [1.0, 2.0])
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    assert {r["value"] for r in rows} == {"1", "2"}


def test_summarize_std_over_seeds():
    rows = [
        {"seed": 0, "epoch": 1, "train_loss": 1.0, "test_acc": 0.5,
         "test_acc_ba": 0.5, "test_acc_bc": 0.5, "beta": 0.5},
        {"seed": 1, "epoch": 1, "train_loss": 1.0, "test_acc": 0.7,
         "test_acc_ba": 0.5, "test_acc_bc": 0.5, "beta": 0.5},
        {"seed": 0, "epoch": 0, "train_loss": 9.0, "test_acc": 0.1,
         "test_acc_ba": 0.1, "test_acc_bc": 0.1, "beta": 0.5},
    ]
    s = summarize(rows)
    assert s["final_epoch"] == 1 and s["n_seeds"] == 2
    assert abs(s["metrics"]["test_acc"]["mean"] - 0.6) < 1e-15
    assert abs(s["metrics"]["test_acc"]["std"] - np.std([0.5, 0.7], ddof=1)) < 1e-15
