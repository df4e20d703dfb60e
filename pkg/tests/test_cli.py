import csv
import json

import numpy as np
import pytest

from idea_ts import cli
from idea_ts.model import IDEAModel, ModelConfig, load_checkpoint

TINY = ["--groups", "1", "--layers", "1", "--hidden", "8", "--context", "4", "--d-k", "4",
        "--d-v", "4", "--d-c", "4", "--batch", "8", "--val-interval", "2"]
SYN = ["--synthetic", "trend_season", "--synthetic-count", "6", "--synthetic-length", "40",
       "--freq", "quarterly"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_csv(path, table):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"V{i + 1}" for i in range(max(len(r) for r in table.values()))])
        for k, v in table.items():
            w.writerow([k] + list(v))
    return path


@pytest.fixture
def trained(tmp_path):
    out = tmp_path / "train"
    assert run("train", *SYN, *TINY, "--steps", 4, "--seed", 1, "--out", out) == 0
    return out


def test_train_writes_artifacts(trained):
    assert (trained / "model.npz").exists()
    log = rows(trained / "train_log.csv")
    assert len(log) == 2 and log[-1]["step"] == "4"
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["command"] == "train" and cfg["seed"] == 1 and cfg["groups"] == 1
    _, extra = load_checkpoint(trained / "model.npz")
    assert extra["frequency"] == "quarterly"


def test_zero_steps_checkpoint_is_initialisation(tmp_path):
    assert run("train", *SYN, *TINY, "--steps", 0, "--seed", 5, "--out", tmp_path) == 0
    model, _ = load_checkpoint(tmp_path / "model.npz")
    fresh = IDEAModel(model.config)
    for name, value in fresh.state_dict().items():
        assert np.array_equal(model.state_dict()[name], value)


def test_rerun_byte_identical(tmp_path, trained):
    again = tmp_path / "again"
    run("train", *SYN, *TINY, "--steps", 4, "--seed", 1, "--out", again)
    for name in ("train_log.csv", "summary.txt"):  # config.json differs by --out
        assert (again / name).read_bytes() == (trained / name).read_bytes()
    assert (again / "model.npz").read_bytes() == (trained / "model.npz").read_bytes()


def test_config_precedence_and_echo_reruns(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"groups": 2, "steps": 9, "lr": 0.01}))
    out = tmp_path / "a"
    assert run("train", "--config", conf, *SYN, *TINY, "--steps", 2, "--out", out) == 0
    cfg = json.loads((out / "config.json").read_text())
    # --groups 1 in TINY beats the file, the file's lr beats the default
    assert cfg["groups"] == 1 and cfg["steps"] == 2 and cfg["lr"] == 0.01
    # the echo alone reruns the command
    out2 = tmp_path / "b"
    assert run("train", "--config", out / "config.json", "--out", out2) == 0
    assert (out2 / "train_log.csv").read_bytes() == (out / "train_log.csv").read_bytes()


def test_unknown_config_key(tmp_path, capsys):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"gruops": 2}))
    assert run("train", "--config", conf, *SYN) == 1
    assert capsys.readouterr().err.startswith("error: unknown config keys")


def test_errors_go_to_stderr(tmp_path, capsys):
    assert run("train", "--out", tmp_path) == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and "--data" in err
    with pytest.raises(SystemExit) as exc:
        run("train", "--groups", "x")
    assert exc.value.code == 2
    assert "error:" in capsys.readouterr().err


def test_invalid_model_config_lists_problems(tmp_path, capsys):
    assert run("train", *SYN, "--topk", 5, "--alpha", 2, "--steps", 1, "--out", tmp_path) == 1
    err = capsys.readouterr().err
    assert "topk" in err and "alpha" in err


def test_eval_naive2_owa_is_one(tmp_path):
    assert run("eval", *SYN, "--baseline", "naive2", "--out", tmp_path) == 0
    owas = [float(r["value"]) for r in rows(tmp_path / "scores.csv") if r["metric"] == "owa"]
    assert owas and all(v == 1.0 for v in owas)


def test_eval_micro_fixture_by_hand(tmp_path):
    data = write_csv(tmp_path / "d.csv", {"Y1": [1, 2, 3, 4], "Y2": [10, 8, 10, 8], "Y3": [2, 4]})
    test = write_csv(tmp_path / "t.csv", {"Y1": [5, 6], "Y2": [10, 8], "Y3": [6, 8]})
    assert run("eval", "--data", data, "--test-data", test, "--freq", "yearly", "--horizon", 2,
               "--baseline", "naive", "--out", tmp_path / "o") == 0
    got = {r["metric"]: float(r["value"]) for r in rows(tmp_path / "o" / "scores.csv")}
    # naive: [4,4], [8,8], [4,4]
    smape = 100 * ((1 / 9 + 2 / 10) + (2 / 18) + (2 / 10 + 4 / 12)) / 3
    mase = (1.5 / 1 + 1.0 / 2 + 3.0 / 2) / 3
    mape = 100 * ((1 / 5 + 2 / 6) + (2 / 10) + (2 / 6 + 4 / 8)) / 6
    assert got["smape"] == pytest.approx(smape, abs=1e-9)
    assert got["mase"] == pytest.approx(mase, abs=1e-9)
    assert got["mape"] == pytest.approx(mape, abs=1e-9)
    assert got["owa"] == 1.0  # naive2 is naive for period 1


def zero_checkpoint(path, lookback=8, horizon=8, groups=1):
    m = IDEAModel(ModelConfig(lookback=lookback, horizon=horizon, groups=groups, layers=1, hidden=4,
                              context=4, d_k=4, d_v=4, d_c=4))
    for p in m.parameters():
        p.value[...] = 0.0
    m.save(path, {"frequency": "quarterly", "period": 4})
    return path


def test_eval_zero_model_smape_200(tmp_path):
    ck = zero_checkpoint(tmp_path / "z.npz")
    assert run("eval", *SYN, "--checkpoint", ck, "--out", tmp_path / "o") == 0
    sm = [float(r["value"]) for r in rows(tmp_path / "o" / "scores.csv") if r["metric"] == "smape"]
    assert sm == [200.0]


def test_eval_horizon_mismatch(tmp_path, capsys):
    ck = zero_checkpoint(tmp_path / "z.npz", horizon=4)
    assert run("eval", *SYN, "--checkpoint", ck, "--out", tmp_path / "o") == 1
    assert "horizon mismatch" in capsys.readouterr().err


def test_eval_frequency_mismatch(tmp_path, capsys):
    ck = zero_checkpoint(tmp_path / "z.npz")
    assert run("eval", "--synthetic", "trend_season", "--freq", "tourism-quarterly",
               "--checkpoint", ck, "--out", tmp_path / "o") == 1
    assert "frequency mismatch" in capsys.readouterr().err


def test_eval_byte_identical(tmp_path, trained):
    for name in ("a", "b"):
        run("eval", *SYN, "--checkpoint", trained / "model.npz", "--baseline", "naive2", "snaive",
            "--out", tmp_path / name)
    assert (tmp_path / "a" / "scores.csv").read_bytes() == (tmp_path / "b" / "scores.csv").read_bytes()


def test_forecast_rows_and_zero_model(tmp_path):
    ck = zero_checkpoint(tmp_path / "z.npz")
    assert run("forecast", *SYN, "--checkpoint", ck, "--plot-data", "--out", tmp_path / "o") == 0
    fc = rows(tmp_path / "o" / "forecasts.csv")
    assert len(fc) == 6 * 8
    assert all(float(r["forecast"]) == 0.0 for r in fc)
    plot = rows(tmp_path / "o" / "plot_data.csv")
    assert len(plot) == 6 * (8 + 8)


def test_forecast_short_series_reported_others_proceed(tmp_path, capsys):
    ck = zero_checkpoint(tmp_path / "z.npz")
    data = write_csv(tmp_path / "d.csv", {"A": range(1, 12), "B": [1, 2, 3], "C": range(20)})
    assert run("forecast", "--data", data, "--freq", "quarterly", "--checkpoint", ck,
               "--out", tmp_path / "o") == 1
    assert "'B'" in capsys.readouterr().err
    ids = {r["id"] for r in rows(tmp_path / "o" / "forecasts.csv")}
    assert ids == {"A", "C"}


def test_forecast_deterministic(tmp_path, trained):
    for name in ("a", "b"):
        run("forecast", *SYN, "--checkpoint", trained / "model.npz", "--out", tmp_path / name)
    assert (tmp_path / "a" / "forecasts.csv").read_bytes() == (tmp_path / "b" / "forecasts.csv").read_bytes()


def test_shift_experiment_k_rows(tmp_path, trained):
    assert run("shift-experiment", "--checkpoint", trained / "model.npz", "--out", tmp_path / "s") == 0
    act = rows(tmp_path / "s" / "activations.csv")
    assert len(act) == 30 * 3
    for i in range(30):
        assert sum(int(r["activated"]) for r in act if r["sample_index"] == str(i)) == 2
    assert "switch at sample 10" in (tmp_path / "s" / "summary.txt").read_text()


def test_shift_constant_model_constant_sets(tmp_path):
    ck = zero_checkpoint(tmp_path / "z.npz", lookback=16)
    assert run("shift-experiment", "--checkpoint", ck, "--out", tmp_path / "s") == 0
    act = rows(tmp_path / "s" / "activations.csv")
    sets = {tuple(int(r["activated"]) for r in act if r["sample_index"] == str(i)) for i in range(30)}
    assert sets == {(1, 1, 0)}  # ties go to the lower learner index


def test_shift_horizon_mismatch(tmp_path, capsys):
    ck = zero_checkpoint(tmp_path / "z.npz")
    assert run("shift-experiment", "--checkpoint", ck, "--horizon", 4, "--out", tmp_path / "s") == 1
    assert "horizon mismatch" in capsys.readouterr().err


def test_shift_layout_and_summary():
    assert cli.SHIFT_LAYOUT[:10] == ["typical"] * 10
    assert cli.SHIFT_LAYOUT[10:15] == ["silent"] * 5
    assert cli.SHIFT_LAYOUT[15:25] == ["typical"] * 10
    active = np.zeros((30, 3), bool)
    active[:, [0, 1]] = True
    active[10:15] = [False, True, True]
    active[25:] = [True, False, True]
    s = cli.shift_summary(active)
    assert s["modal"]["typical"] == (0, 1) and s["modal"]["silent"] == (1, 2)
    assert s["changed_near_switch"] == {10: True, 25: True}


def test_shift_samples_shapes():
    w = cli.shift_samples(12, 4, seed=0)
    assert w.shape == (30, 12)
    silent = w[10]
    assert silent[-1] - np.median(silent[:-1]) >= 15


def test_stats(tmp_path):
    assert run("stats", *SYN, "--out", tmp_path) == 0
    (row,) = rows(tmp_path / "stats.csv")
    assert row["frequency"] == "quarterly" and row["count"] == "6" and row["max_length"] == "40"


def test_ensemble_train_and_eval(tmp_path):
    out = tmp_path / "ens"
    assert run("train", *SYN, *TINY, "--synthetic-length", 60, "--ensemble", "--multipliers", 2, 3,
               "--steps", 2, "--out", out) == 0
    names = (out / "checkpoints.txt").read_text().split()
    assert names == ["model_t16.npz", "model_t24.npz"]
    assert run("eval", *SYN, "--synthetic-length", 60, "--checkpoint", *[out / n for n in names],
               "--out", tmp_path / "ev") == 0
    methods = {r["method"] for r in rows(tmp_path / "ev" / "scores.csv")}
    assert methods == {"IDEA-Interpretable", "IDEA-Interpretable-slotavg"}
