import csv
import json

import numpy as np
import pytest

from advforecast.cli import ConfigError, load_config, main, parse_config


def _write(path, text):
    path.write_text(text)
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "run.cfg"
    cfg.write_text(
        "synth.kind = ar1_returns\nsynth.a = 0.4\nsynth.sigma = 0.015\nsynth.length = 160\nsynth.n_series = 6\n"
        f"out = {root}\ndata.path = {root / 'data.csv'}\nwindow.input = 11\nwindow.output = 4\n"
        "model.hidden = 4\ntrain.max_epochs = 3\ntrain.batch_size = 256\nstat = cum_return:3\n"
        "forecast.samples = 200\nforecast.max_windows = 5\nattack.iterations = 4\nattack.samples = 10\n"
        "attack.eval_samples = 100\nattack.max_windows = 3\nattack.c_grid = 10,1000\n"
        "backtest.h = 1,3\nbacktest.k = 1,2\nbacktest.samples = 100\n"
    )
    assert main(["synth", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg)]) == 0
    return root, cfg


def test_parse_rejects_unknown_and_bad_values():
    assert parse_config("seed = 4  # comment\n\n")["seed"] == 4
    with pytest.raises(ConfigError):
        parse_config("mystery = 1")
    with pytest.raises(ConfigError):
        parse_config("seed = four")
    with pytest.raises(ConfigError):
        parse_config("seed 4")
    assert load_config(None, {"seed": "9"})["seed"] == 9


def test_exit_codes(tmp_path):
    assert main(["train", "--config", _write(tmp_path / "a.cfg", "bogus = 1")]) == 2
    missing = _write(tmp_path / "b.cfg", f"data.path = {tmp_path / 'none.csv'}\nout = {tmp_path / 'o'}")
    assert main(["train", "--config", missing]) == 3
    assert not (tmp_path / "o" / "checkpoint.npz").exists()


def test_synth_shape_and_manifest(tmp_path):
    cfg = _write(tmp_path / "s.cfg", f"out = {tmp_path}\nsynth.n_series = 10\nsynth.length = 300\n")
    assert main(["synth", "--config", cfg]) == 0
    rows = list(csv.DictReader(open(tmp_path / "data.csv")))
    assert len(rows) == 3000
    first = (tmp_path / "data.csv").read_bytes()
    assert main(["synth", "--config", str(tmp_path / "resolved_config.cfg")]) == 0
    assert (tmp_path / "data.csv").read_bytes() == first
    assert json.loads((tmp_path / "manifest.json").read_text())["synthetic"]["n_series"] == 10


def test_train_outputs_and_determinism(trained, tmp_path):
    root, cfg = trained
    trace = list(csv.DictReader(open(root / "train_trace.csv")))
    assert np.isfinite(float(trace[-1]["val_nll"]))
    again = tmp_path / "again"
    assert main(["train", "--config", str(cfg), "--out", str(again)]) == 0
    a, b = np.load(root / "checkpoint.npz"), np.load(again / "checkpoint.npz")
    for k in a.files:
        np.testing.assert_array_equal(a[k], b[k])


def test_forecast(trained, tmp_path):
    root, cfg = trained
    out = tmp_path / "f"
    args = ["forecast", "--config", str(cfg), "--out", str(out), "--checkpoint", str(root / "checkpoint.npz")]
    assert main(args) == 0
    rows = list(csv.DictReader(open(out / "forecast.csv")))
    assert len(rows) == 5 and all(r["se"] for r in rows)
    extra = _write(tmp_path / "t.cfg", cfg.read_text() + "observation = none\nstat = cum_return:3,european_call:2:1.0\n")
    assert main(["forecast", "--config", extra, "--out", str(out / "t"), "--checkpoint", str(root / "checkpoint.npz")]) == 0
    rows2 = list(csv.DictReader(open(out / "t" / "forecast.csv")))
    assert len(rows2) == 10 and rows2[0]["estimate"] == rows[0]["estimate"]
    bad = _write(tmp_path / "h.cfg", cfg.read_text() + "stat = cum_return:9\n")
    assert main(["forecast", "--config", bad, "--checkpoint", str(root / "checkpoint.npz")]) == 2
    one = _write(tmp_path / "one.cfg", cfg.read_text() + "forecast.samples = 1\n")
    assert main(["forecast", "--config", one, "--out", str(out / "one"), "--checkpoint", str(root / "checkpoint.npz")]) == 0
    assert list(csv.DictReader(open(out / "one" / "forecast.csv")))[0]["se"] == ""


def test_attack_and_backtest(trained, tmp_path):
    root, cfg = trained
    ck = str(root / "checkpoint.npz")
    both = _write(tmp_path / "a.cfg", cfg.read_text() + "attack.estimator = both\n")
    out = tmp_path / "a"
    assert main(["attack", "--config", both, "--out", str(out), "--checkpoint", ck]) == 0
    curves = list(csv.DictReader(open(out / "curves.csv")))
    assert len(curves) == 6
    first = (out / "attack_results.jsonl").read_text()
    assert main(["attack", "--config", both, "--out", str(out), "--checkpoint", ck]) == 0
    assert (out / "attack_results.jsonl").read_text() == first
    bayes = _write(tmp_path / "b.cfg", cfg.read_text() + "attack.estimator = score_function\n"
                   "observation = coordinate:1:1.0:relative\n")
    assert main(["attack", "--config", bayes, "--out", str(tmp_path / "b"), "--checkpoint", ck]) == 2
    bt = tmp_path / "bt"
    assert main(["backtest", "--config", str(cfg), "--out", str(bt), "--checkpoint", ck]) == 0
    rows = list(csv.DictReader(open(bt / "backtest.csv")))
    assert [(r["h"], r["k"]) for r in rows] == [("1", "1"), ("1", "2"), ("3", "1"), ("3", "2")]
    # null attack: pre and post identical
    null = tmp_path / "null.jsonl"
    null.write_text("".join(json.dumps({"window_id": json.loads(line)["window_id"], "delta": [0.0] * 11,
                                        "success": True}) + "\n" for line in first.splitlines()))
    post_cfg = _write(tmp_path / "p.cfg", cfg.read_text() + f"backtest.attack_results = {null}\n")
    assert main(["backtest", "--config", post_cfg, "--out", str(tmp_path / "p"), "--checkpoint", ck]) == 0
    for r in csv.DictReader(open(tmp_path / "p" / "backtest.csv")):
        assert r["mean_return"] == r["mean_return_post"]
    big_k = _write(tmp_path / "k.cfg", cfg.read_text() + "backtest.k = 50\n")
    assert main(["backtest", "--config", big_k, "--out", str(tmp_path / "k"), "--checkpoint", ck]) == 0
    assert int(next(csv.DictReader(open(tmp_path / "k" / "backtest.csv")))["shortfall_steps"]) > 0
