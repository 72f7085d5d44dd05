"""Command-line entry point: ``advforecast <command> --config run.cfg``.

Configuration files hold one ``key = value`` pair per line (``#`` starts a
comment).  Every command writes ``resolved_config.cfg`` next to its outputs;
running again from that file reproduces the outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import data as D
from .attack import AttackConfig, AttackTarget, classification_targets, run_suite, trading_target
from .evaluation import (
    attack_curves,
    backtest_scores,
    classify,
    group_steps,
    realized_cum_return,
    relative_changes,
    write_backtest_csv,
    write_curves_csv,
)
from .model import TrainConfig, init_model, load_checkpoint, save_checkpoint, train
from .sampling import Observation, Statistic, confidence_interval, estimate_many

log = logging.getLogger("advforecast")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# key -> (type, default)
SCHEMA = {
    "seed": (int, 0),
    "out": (str, "runs/default"),
    "workers": (int, 1),
    "checkpoint": (str, ""),
    "data.path": (str, ""),
    "window.input": (int, 41),
    "window.output": (int, 10),
    "window.stride": (int, 1),
    "split.train_start": (str, ""),
    "split.train_end": (str, ""),
    "split.test_end": (str, ""),
    "split.val_fraction": (float, 0.15),
    "transform": (str, "returns"),
    "model.layers": (int, 1),
    "model.hidden": (int, 25),
    "train.learning_rate": (float, 0.01),
    "train.batch_size": (int, 2048),
    "train.patience": (int, 20),
    "train.max_epochs": (int, 200),
    "train.optimizer": (str, "rmsprop"),
    "train.clip_norm": (float, 10.0),
    "stat": (str, "cum_return:10"),
    "observation": (str, "none"),
    "forecast.samples": (int, 10_000),
    "forecast.level": (float, 0.95),
    "forecast.max_windows": (int, 0),
    "attack.preset": (str, "financial"),
    "attack.target": (str, "classification"),
    "attack.direction": (str, "auto"),
    "attack.epsilons": (str, "0.001,0.01,0.1"),
    "attack.estimator": (str, "reparametrization"),
    "attack.iterations": (int, 1000),
    "attack.learning_rate": (float, 0.0),
    "attack.samples": (int, 50),
    "attack.eval_samples": (int, 10_000),
    "attack.c_grid": (str, ""),
    "attack.optimizer": (str, "rmsprop"),
    "attack.lambda": (float, 0.03),
    "attack.alpha": (float, 0.1),
    "attack.max_windows": (int, 0),
    "attack.traces": (int, 0),
    "backtest.h": (str, "10"),
    "backtest.k": (str, "10"),
    "backtest.samples": (int, 1000),
    "backtest.attack_results": (str, ""),
    "synth.kind": (str, "ar1"),
    "synth.a": (float, 0.7),
    "synth.b": (float, 0.0),
    "synth.sigma": (float, 0.1),
    "synth.length": (int, 300),
    "synth.n_series": (int, 10),
    "synth.p0": (float, 10.0),
    "synth.start": (str, "1990-01-01"),
    "synth.period": (int, 24),
    "synth.amplitude": (float, 0.5),
    "synth.level": (float, 100.0),
    "gradcheck.trials": (int, 200),
    "gradcheck.samples": (int, 1000),
}


def _coerce(key, raw):
    typ = SCHEMA[key][0]
    try:
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot read {raw!r} as {typ.__name__}") from exc


def parse_config(text: str) -> dict:
    cfg = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        cfg[key] = _coerce(key, raw)
    return cfg


def resolve(cfg: dict) -> dict:
    full = {k: d for k, (_, d) in SCHEMA.items()}
    full.update(cfg)
    return full


def format_config(cfg: dict) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))


def load_config(path, overrides) -> dict:
    cfg = {}
    if path:
        try:
            cfg = parse_config(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
    for k, v in overrides.items():
        if v is not None:
            cfg[k] = _coerce(k, v)
    return resolve(cfg)


def _floats(text):
    return [float(t) for t in str(text).split(",") if t.strip()]


def _ints(text):
    return [int(t) for t in str(text).split(",") if t.strip()]


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.cfg").write_text(format_config(cfg), encoding="utf-8")
    return out


def _atomic_write(path: Path, writer):
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=path.suffix)
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


# ---------------------------------------------------------------- data


def _load_series(cfg):
    path = cfg["data.path"]
    if not path:
        raise ConfigError("data.path is required")
    try:
        series = D.read_csv(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not series:
        raise DataError(f"{path}: no series")
    return series


def _split_rule(cfg, series):
    if cfg["split.train_start"] and cfg["split.train_end"] and cfg["split.test_end"]:
        return D.SplitRule.from_strings(cfg["split.train_start"], cfg["split.train_end"], cfg["split.test_end"])
    dates = np.unique(np.concatenate([s.dates for s in series]))
    return D.SplitRule(dates[0], dates[int(0.8 * (len(dates) - 1))], dates[-1])


def _windows(cfg, series):
    n, m = cfg["window.input"], cfg["window.output"]
    if n < 2 or m < 1:
        raise ConfigError("window.input must be >= 2 and window.output >= 1")
    try:
        return D.make_windows(series, n, m, _split_rule(cfg, series), cfg["window.stride"], cfg["split.val_fraction"],
                              normalize_returns=cfg["transform"] == "returns")
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def _transform(cfg, ws):
    kind = cfg["transform"]
    if kind == "returns":
        return D.ReturnsTransform(*ws.normalization)
    if kind == "identity":
        return D.IdentityTransform()
    if kind == "average":
        return D.AverageScaleTransform()
    raise ConfigError(f"unknown transform {kind!r}")


def _checkpoint(cfg, args):
    path = getattr(args, "checkpoint", None) or cfg["checkpoint"] or str(Path(cfg["out"]) / "checkpoint.npz")
    try:
        return load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc


def _stats(cfg):
    try:
        return [Statistic.parse(s) for s in cfg["stat"].split(",") if s.strip()]
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"stat: {exc}") from exc


def _observation(cfg):
    try:
        return Observation.parse(cfg["observation"])
    except ValueError as exc:
        raise ConfigError(f"observation: {exc}") from exc


def _limit(ws, k):
    return ws if not k or k >= len(ws) else _subset(ws, np.arange(k))


def _subset(ws, idx):
    return D.WindowSet(ws.inputs[idx], ws.targets[idx], ws.series_ids[idx], ws.starts[idx], ws.split[idx],
                       ws.target_dates[idx], ws.normalization, ws.rule)


# ---------------------------------------------------------------- commands


def cmd_synth(cfg, args):
    out = _out_dir(cfg)
    spec = D.SyntheticSpec(kind=cfg["synth.kind"], a=cfg["synth.a"], b=cfg["synth.b"], sigma=cfg["synth.sigma"],
                           length=cfg["synth.length"], n_series=cfg["synth.n_series"], seed=cfg["seed"],
                           p0=cfg["synth.p0"], start=cfg["synth.start"], period=cfg["synth.period"],
                           amplitude=cfg["synth.amplitude"], level=cfg["synth.level"])
    D.write_csv(D.gen_ar1(spec), out / "data.csv")
    D.write_manifest(spec, out / "manifest.json")
    print(out / "data.csv")
    return 0


def cmd_train(cfg, args):
    series = _load_series(cfg)
    ws = _windows(cfg, series)
    tr = _transform(cfg, ws)
    n = cfg["window.input"]
    fit, val = ws.select("train"), ws.select("val")
    if len(fit) == 0 or len(val) == 0:
        raise DataError("training or validation split is empty")
    try:
        seqs_fit = tr.encode_window(fit.full(), n)
        seqs_val = tr.encode_window(val.full(), n)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    out = _out_dir(cfg)
    model = init_model(cfg["model.hidden"], cfg["model.layers"], cfg["seed"], tr)
    tc = TrainConfig(cfg["train.learning_rate"], cfg["train.batch_size"], cfg["train.patience"],
                     cfg["train.max_epochs"], cfg["train.optimizer"], cfg["seed"], cfg["train.clip_norm"])
    best, trace = train(model, seqs_fit, seqs_val, tc)
    with open(out / "train_trace.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_nll", "val_nll"])
        w.writeheader()
        w.writerows(trace)
    _atomic_write(out / "checkpoint.npz", lambda p: save_checkpoint(best, p))
    print(f"best val nll {min(r['val_nll'] for r in trace):.6f}")
    return 0


def cmd_forecast(cfg, args):
    model = _checkpoint(cfg, args)
    stats, obs = _stats(cfg), _observation(cfg)
    m = cfg["window.output"]
    for s in stats:
        if s.h > m:
            raise ConfigError(f"statistic horizon {s.h} exceeds window.output {m}")
    if not obs.trivial and obs.index > m:
        raise ConfigError("observation index exceeds window.output")
    ws = _limit(_windows(cfg, _load_series(cfg)).select("test"), cfg["forecast.max_windows"])
    out = _out_dir(cfg)
    L, level = cfg["forecast.samples"], cfg["forecast.level"]
    rows = []
    ids = ws.window_ids
    for s in stats:
        vals, ses = estimate_many(model, ws.inputs, s, obs, L, [cfg["seed"]] * len(ws), m)
        for i in range(len(ws)):
            row = {"window_id": ids[i], "stat": str(s), "estimate": repr(float(vals[i])),
                   "se": "", "ci_low": "", "ci_high": ""}
            if L >= 2:
                lo, hi = confidence_interval(vals[i], ses[i], L, level)
                row.update(se=repr(float(ses[i])), ci_low=repr(float(lo)), ci_high=repr(float(hi)))
            rows.append(row)
    with open(out / "forecast.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["window_id", "stat", "estimate", "se", "ci_low", "ci_high"])
        w.writeheader()
        w.writerows(rows)
    (out / "forecast.json").write_text(json.dumps(rows, indent=1), encoding="utf-8")
    print(out / "forecast.csv")
    return 0


def _attack_config(cfg, estimator):
    over = dict(iterations=cfg["attack.iterations"], L=cfg["attack.samples"], eval_samples=cfg["attack.eval_samples"],
                optimizer=cfg["attack.optimizer"], seed=cfg["seed"], estimator=estimator,
                level=cfg["forecast.level"], positive=cfg["transform"] != "identity")
    if cfg["attack.learning_rate"] > 0:
        over["learning_rate"] = cfg["attack.learning_rate"]
    if cfg["attack.c_grid"]:
        over["c_grid"] = tuple(_floats(cfg["attack.c_grid"]))
    try:
        return AttackConfig.preset(cfg["attack.preset"], **over)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_targets(cfg, model, ws, stat, obs):
    """Resolve the configured target construction for every window."""
    kind = cfg["attack.target"]
    L, seed = cfg["attack.eval_samples"], cfg["seed"]
    truth = realized_cum_return(ws, stat.h) if stat.kind == "cum_return" else None
    if kind in ("classification", "trading"):
        if truth is None:
            raise ConfigError(f"{kind} targets need a cum_return statistic")
        tau = float(np.mean(truth))
        if kind == "trading":
            return [AttackTarget(trading_target(tau, cfg["attack.alpha"], float(g)), "trading_reversal", tau)
                    for g in truth]
        buy, sell = classification_targets(tau, cfg["attack.lambda"])
        direction = cfg["attack.direction"]
        if direction == "auto":
            est, _ = estimate_many(model, ws.inputs, stat, obs, L, [seed] * len(ws))
            pick = ["sell" if e >= tau else "buy" for e in est]
        elif direction in ("buy", "sell"):
            pick = [direction] * len(ws)
        else:
            raise ConfigError("attack.direction must be auto, buy or sell")
        return [AttackTarget(buy, "classification_buy", tau) if p == "buy" else
                AttackTarget(sell, "classification_sell", tau) for p in pick]
    if kind in ("consumption_over", "consumption_under"):
        y_star, _ = estimate_many(model, ws.inputs, Statistic("coordinate", stat.h), obs, L, [seed] * len(ws))
        f = 1.5 if kind.endswith("over") else 0.5
        return [AttackTarget(f * y, kind, reference=float(y)) for y in y_star]
    if kind.startswith("explicit"):
        parts = kind.split(":")
        if len(parts) == 2:
            return [AttackTarget(float(parts[1]))] * len(ws)
        est, _ = estimate_many(model, ws.inputs, stat, obs, L, [seed] * len(ws))
        return [AttackTarget(float(e)) for e in est]
    raise ConfigError(f"unknown attack.target {kind!r}")


def cmd_attack(cfg, args):
    model = _checkpoint(cfg, args)
    stats, obs = _stats(cfg), _observation(cfg)
    if len(stats) != 1:
        raise ConfigError("attack needs exactly one statistic")
    stat = stats[0]
    ests = ["reparametrization", "score_function"] if cfg["attack.estimator"] == "both" else [cfg["attack.estimator"]]
    configs = [_attack_config(cfg, e) for e in ests]
    if not obs.trivial and any(c.estimator == "score_function" for c in configs):
        raise ConfigError("score-function estimator supports only the trivial observation")
    eps = sorted(_floats(cfg["attack.epsilons"]))
    ws = _limit(_windows(cfg, _load_series(cfg)).select("test"), cfg["attack.max_windows"])
    if len(ws) == 0:
        raise DataError("no test windows")
    out = _out_dir(cfg)
    targets = build_targets(cfg, model, ws, stat, obs)
    table = {}
    with open(out / "attack_results.jsonl", "w", encoding="utf-8") as fh:
        for ac in configs:
            run = run_suite(model, ws.inputs, stat, obs, targets, ac, ws.window_ids)
            for e in eps:
                res = run.results(e)
                table[(ac.estimator, e)] = res
                for r in res:
                    fh.write(r.to_json(with_traces=bool(cfg["attack.traces"])) + "\n")
    periods = [int(str(d)[:4]) for d in ws.target_dates[:, 0]]
    write_curves_csv(attack_curves(table, eps, periods), out / "curves.csv")
    if cfg["attack.target"].startswith("consumption"):
        rel = relative_changes(table[(configs[0].estimator, eps[-1])])
        np.savetxt(out / "relative_changes.csv", rel, header="relative_change", comments="")
    print(out / "curves.csv")
    return 0


def cmd_backtest(cfg, args):
    model = _checkpoint(cfg, args)
    ws = _windows(cfg, _load_series(cfg)).select("test")
    if len(ws) == 0:
        raise DataError("test split is empty")
    out = _out_dir(cfg)
    L, seed = cfg["backtest.samples"], cfg["seed"]
    post_inputs = None
    if cfg["backtest.attack_results"]:
        post_inputs = ws.inputs.copy()
        where = {wid: i for i, wid in enumerate(ws.window_ids)}
        with open(cfg["backtest.attack_results"], encoding="utf-8") as fh:
            for line in fh:
                r = json.loads(line)
                i = where.get(r["window_id"])
                if i is not None and r.get("success", False):
                    post_inputs[i] = ws.inputs[i] + np.asarray(r["delta"])
    rows = []
    for h in _ints(cfg["backtest.h"]):
        if h > cfg["window.output"]:
            raise ConfigError(f"h={h} exceeds window.output")
        stat = Statistic("cum_return", h)
        scores, _ = estimate_many(model, ws.inputs, stat, _observation(cfg), L, [seed] * len(ws), h)
        truth = realized_cum_return(ws, h)
        post = None
        if post_inputs is not None:
            post, _ = estimate_many(model, post_inputs, stat, _observation(cfg), L, [seed] * len(ws), h)
        for k in _ints(cfg["backtest.k"]):
            rep = backtest_scores(group_steps(ws, scores, truth), h, k)
            row = rep.row()
            if post is not None:
                prep = backtest_scores(group_steps(ws, post, truth), h, k)
                row.update(mean_return_post=prep.mean_return, std_post=prep.std)
            rows.append(row)
    extra = ["mean_return_post", "std_post"] if post_inputs is not None else []
    write_backtest_csv(rows, out / "backtest.csv", extra)
    print(out / "backtest.csv")
    return 0


def cmd_grad_check(cfg, args):
    from .autodiff import finite_difference_check
    from .estimators import estimate_at, estimator_agreement, reparam_gradient
    from .model import sequence_nll

    out = _out_dir(cfg)
    rng = np.random.default_rng(cfg["seed"])
    model = init_model(4, 1, cfg["seed"], D.ReturnsTransform(0.0, 0.02))
    seqs = rng.normal(size=(3, 6))
    names = model.param_names()

    def loss(*ps):
        return sequence_nll(model, seqs, dict(zip(names, ps)))

    fd = finite_difference_check(loss, [model.params[k] for k in names])
    x = 10 * np.exp(np.cumsum(rng.normal(0, 0.02, 8)))
    stat = Statistic("cum_return", 5)
    g = reparam_gradient(model, x, None, stat, L=50, seed=cfg["seed"])
    h = 1e-6
    num = np.array([(estimate_at(model, x, h * e, stat, L=50, seed=cfg["seed"])
                     - estimate_at(model, x, -h * e, stat, L=50, seed=cfg["seed"])) / (2 * h) for e in np.eye(len(x))])
    crn = float(np.max(np.abs(g.grad - num)) / max(np.max(np.abs(num)), 1e-12))
    agree = estimator_agreement(model, x, stat, cfg["gradcheck.trials"], cfg["gradcheck.samples"], cfg["seed"])
    report = {"nll_fd_max_rel_error": fd.max_rel_error, "reparam_crn_rel_error": crn,
              "agreement": agree.to_dict()}
    (out / "grad_check.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    ok = fd.max_rel_error <= 1e-4 and crn <= 1e-3 and agree.cosine > 0.95 and agree.within_3se >= 0.95
    print(json.dumps({k: v for k, v in report.items() if k != "agreement"} | {"cosine": agree.cosine,
                                                                               "within_3se": agree.within_3se}))
    return 0 if ok else EXIT_NUMERIC


COMMANDS = {
    "train": cmd_train,
    "forecast": cmd_forecast,
    "attack": cmd_attack,
    "backtest": cmd_backtest,
    "synth": cmd_synth,
    "grad-check": cmd_grad_check,
}


def build_parser():
    p = argparse.ArgumentParser(prog="advforecast", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--seed", type=int, help="overrides the seed key")
        sp.add_argument("--out", help="output directory (overrides the out key)")
        if name in ("forecast", "attack", "backtest"):
            sp.add_argument("--checkpoint", help="model checkpoint (default: <out>/checkpoint.npz)")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, {"seed": args.seed, "out": args.out})
        start = time.perf_counter()
        code = COMMANDS[args.command](cfg, args)
        log.info("%s finished in %.1fs", args.command, time.perf_counter() - start)
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
