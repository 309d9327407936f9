import csv
import json

import numpy as np
import pytest

from revspike.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, dispatch


def run(tmp_path, name, cfg, sub, seed=None):
    cfg_path = tmp_path / f"{name}.json"
    cfg_path.write_text(json.dumps(cfg))
    argv = ["--config", str(cfg_path), "--out", str(tmp_path / name)]
    if seed is not None:
        argv += ["--seed", str(seed)]
    return dispatch(argv + [sub]), tmp_path / name


def test_missing_config_is_usage_error(tmp_path):
    assert dispatch(["--config", str(tmp_path / "nope.json"), "--out", str(tmp_path), "train"]) == EXIT_USAGE


def test_unknown_key_rejected(tmp_path):
    code, _ = run(tmp_path, "bad", {"no_such_key": 1}, "train")
    assert code == EXIT_USAGE


def test_malformed_json(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text("{")
    assert dispatch(["--config", str(p), "--out", str(tmp_path), "train"]) == EXIT_USAGE


def test_resolved_config_written(tmp_path):
    cfg = {"n_samples": 30, "n_spikes": 40, "m_values": [4, 8, 16], "n_seeds": 1,
           "e_rev_values": [2, 4, 8]}
    code, out = run(tmp_path, "conv", cfg, "convergence")
    assert code == EXIT_OK
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["command"] == "convergence"
    assert resolved["n_samples"] == 30
    assert (out / "convergence_steps.csv").exists()
    assert (out / "slopes.json").exists()


def test_convergence_deterministic_bytes(tmp_path):
    cfg = {"n_samples": 25, "n_spikes": 30, "m_values": [4, 8, 16], "n_seeds": 2,
           "e_rev_values": [2, 4, 8]}
    _, out1 = run(tmp_path, "c1", cfg, "convergence", seed=7)
    _, out2 = run(tmp_path, "c2", cfg, "convergence", seed=7)
    assert (out1 / "convergence_steps.csv").read_bytes() == (out2 / "convergence_steps.csv").read_bytes()
    assert (out1 / "convergence_e_rev.csv").read_bytes() == (out2 / "convergence_e_rev.csv").read_bytes()


def test_train_eval_cycle_on_builtin(tmp_path):
    cfg = {
        "dataset": {"kind": "digits_builtin", "test_count": 97, "limit_train": 300},
        "model": {"hidden": [16], "m_train": 6, "m_test": 8},
        "training": {"epochs": 1, "learning_rate": 1e-3},
    }
    code, out = run(tmp_path, "tr", cfg, "train")
    assert code == EXIT_OK
    assert (out / "history.csv").exists() and (out / "checkpoint.json").exists()
    rows = list(csv.DictReader(open(out / "history.csv")))
    assert len(rows) == 1

    eval_cfg = {"checkpoint": str(out / "checkpoint.json"),
                "dataset": {"kind": "digits_builtin", "test_count": 97}}
    code2, out2 = run(tmp_path, "ev", eval_cfg, "eval")
    assert code2 == EXIT_OK
    metrics = json.loads((out2 / "metrics.json").read_text())
    assert 0.0 <= metrics["test_accuracy"] <= 1.0


def test_eval_without_checkpoint_is_usage(tmp_path):
    code, _ = run(tmp_path, "ev2", {"dataset": {"kind": "digits_builtin"}}, "eval")
    assert code == EXIT_USAGE


def test_map_and_simulate(tmp_path, iris_csv):
    cfg = {
        "dataset": {"kind": "iris_csv", "csv": str(iris_csv)},
        "epochs": 25,
        "scale_window": [0.95, 1.05],
        "scale_step": 0.05,
        "modes": ["pnn_to_imc"],
    }
    code, out = run(tmp_path, "map", cfg, "map")
    assert code == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert "pnn_to_imc" in report and report["pnn_to_imc"]["rmse_s"] >= 0.0
    hist = list(csv.DictReader(open(out / "histogram_pnn_to_imc.csv")))
    assert {"sample_id", "neuron_id", "model_time_s", "circuit_time_s", "delta_s"} <= set(hist[0])

    sim_cfg = {"dataset": {"kind": "iris_csv", "csv": str(iris_csv)}, "sample_index": 0}
    code2, out2 = run(tmp_path, "sim", sim_cfg, "simulate")
    assert code2 == EXIT_OK
    rows = list(csv.DictReader(open(out2 / "trace.csv")))
    assert {r["phase"] for r in rows} == {"reset", "accumulation", "firing"}


def test_simulate_bad_sample_index(tmp_path, iris_csv):
    cfg = {"dataset": {"kind": "iris_csv", "csv": str(iris_csv)}, "sample_index": 999}
    code, _ = run(tmp_path, "sim2", cfg, "simulate")
    assert code == EXIT_USAGE


def test_map_on_missing_csv_is_data_error(tmp_path):
    cfg = {"dataset": {"kind": "iris_csv", "csv": str(tmp_path / "none.csv")}}
    code, _ = run(tmp_path, "map2", cfg, "map")
    assert code == EXIT_DATA


def test_gradcheck_command(tmp_path):
    cfg = {"n_models": 1, "m_steps": 5, "sizes": [4, 5, 3]}
    code, out = run(tmp_path, "gc", cfg, "gradcheck")
    assert code == EXIT_OK
    doc = json.loads((out / "gradcheck.json").read_text())
    assert doc["max_rel_err"] < 1e-5


def test_help_exits_zero():
    assert dispatch(["--help"]) == EXIT_OK
