import csv
import json

import numpy as np
import pytest

from cfsurv.cli import EXIT_CONFIG, EXIT_DATA, main


def write_config(tmp_path, **overrides):
    lines = {
        "dgp.n": 120, "dgp.K": 2, "dgp.d": 2, "dgp.censor_rate": 0.2,
        "train.epochs": 2, "train.batch_size": 60,
        "model.hidden": 6, "model.repr_dim": 4, "model.head_hidden": 6,
        "grid_m": 4, "replications": 1, "seed": 3,
    }
    lines.update(overrides)
    path = tmp_path / "config.txt"
    path.write_text("".join(f"{k} = {v}\n" for k, v in lines.items()))
    return str(path)


def test_simulate_fit_train_evaluate_predict(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("TVSURV_THREADS", "1")
    data = str(tmp_path / "cohort.jsonl")
    assert main(["simulate", "--n", "120", "--k", "2", "--d", "2",
                 "--seed", "3", "--out", data]) == 0

    weights = str(tmp_path / "weights.csv")
    assert main(["fit-weights", "--data", data, "--out", weights]) == 0
    assert (tmp_path / "weights.diagnostics.json").exists()
    diag = json.loads((tmp_path / "weights.diagnostics.json").read_text())
    assert 0.5 < diag["mean"] < 1.5

    config = write_config(tmp_path)
    ckpt = str(tmp_path / "ckpt.json")
    assert main(["train", "--config", config, "--data", data,
                 "--weights", weights, "--out", ckpt]) == 0
    assert (tmp_path / "ckpt.epochs.jsonl").exists()

    report = str(tmp_path / "eval.json")
    assert main(["evaluate", "--config", config, "--data", data,
                 "--checkpoint", ckpt, "--out", report]) == 0
    payload = json.loads((tmp_path / "eval.json").read_text())
    assert set(payload) >= {"tv_pehe", "c_index", "ibs", "irmse"}

    curves_dir = tmp_path / "curves"
    assert main(["predict", "--checkpoint", ckpt, "--data", data,
                 "--sequence", "111", "--sequence", "000",
                 "--out", str(curves_dir)]) == 0
    for seq in ("111", "000"):
        with open(curves_dir / f"curves_{seq}.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["tau", "survival"]
        assert rows[1] == ["0.0", "1.0"]
        surv = np.array([float(r[1]) for r in rows[1:]])
        assert ((surv > 0) & (surv <= 1)).all()


def test_missing_data_file_is_data_error(tmp_path, capsys):
    assert main(["fit-weights", "--data", str(tmp_path / "nope.jsonl")]) \
        == EXIT_DATA
    assert "data error" in capsys.readouterr().err


def test_unknown_config_key_is_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("dgp.gravity = 9.8\n")
    data = tmp_path / "cohort.jsonl"
    data.write_text("")
    assert main(["train", "--config", str(bad), "--data", str(data)]) \
        == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_predict_rejects_bad_sequence(tmp_path, monkeypatch):
    monkeypatch.setenv("TVSURV_THREADS", "1")
    data = str(tmp_path / "cohort.jsonl")
    main(["simulate", "--n", "40", "--k", "1", "--d", "2", "--out", data])
    config = write_config(tmp_path, **{"dgp.n": 40, "dgp.K": 1})
    ckpt = str(tmp_path / "ckpt.json")
    main(["train", "--config", config, "--data", data, "--out", ckpt])
    assert main(["predict", "--checkpoint", ckpt, "--data", data,
                 "--sequence", "10101", "--out", str(tmp_path / "c")]) \
        == EXIT_CONFIG


def test_experiment_subcommand(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("TVSURV_THREADS", "1")
    config = write_config(tmp_path)
    out = tmp_path / "exp"
    assert main(["experiment", "--config", config, "--out", str(out)]) == 0
    assert (out / "summary.csv").exists()
    assert "tv_pehe" in capsys.readouterr().out
