"""Desk-scale experiment recipes shared by ``scripts/`` and the acceptance tests.

Each recipe is a dataclass config plus a function that runs it end to end on
synthetic data and returns a plain summary.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import data as D
from .attack import FINANCIAL_C_GRID, AttackConfig, AttackTarget, SuiteRun, classification_targets, run_suite
from .evaluation import realized_cum_return
from .model import ForecastModel, TrainConfig, init_model, sequence_nll, train
from .sampling import TRIVIAL, Statistic, estimate_many

log = logging.getLogger(__name__)


# ------------------------------------------------------------ financial-style


@dataclass
class FinancialConfig:
    """AR(1) daily returns compounded into prices; first ``train_points`` dates train."""

    a: float = 0.5
    sigma: float = 0.015
    length: int = 700
    n_series: int = 30
    data_seed: int = 1
    train_points: int = 500
    n: int = 41
    m: int = 10
    hidden: int = 16
    max_epochs: int = 60
    batch_size: int = 512
    patience: int = 10
    train_seed: int = 0


def financial_windows(cfg: FinancialConfig) -> D.WindowSet:
    series = D.gen_ar1(D.SyntheticSpec(kind="ar1_returns", a=cfg.a, sigma=cfg.sigma, length=cfg.length,
                                       n_series=cfg.n_series, seed=cfg.data_seed))
    dates = series[0].dates
    rule = D.SplitRule(dates[0], dates[cfg.train_points - 1], dates[-1])
    return D.make_windows(series, cfg.n, cfg.m, rule, stride=1)


def train_financial(cfg: FinancialConfig, ws: D.WindowSet | None = None):
    """Train a returns-space forecaster; returns ``(model, windows, trace)``."""
    ws = financial_windows(cfg) if ws is None else ws
    tr = D.ReturnsTransform(*ws.normalization)
    model = init_model(cfg.hidden, 1, cfg.train_seed, tr)
    seqs = {s: tr.encode_window(ws.select(s).full(), cfg.n) for s in ("train", "val")}
    tc = TrainConfig(max_epochs=cfg.max_epochs, batch_size=cfg.batch_size, patience=cfg.patience,
                     seed=cfg.train_seed)
    best, trace = train(model, seqs["train"], seqs["val"], tc)
    return best, ws, trace


# ------------------------------------------------------------------ efficacy


@dataclass
class EfficacyConfig:
    windows: int = 100
    h: int = 10
    forecast_samples: int = 2000
    lam: float = 0.03
    iterations: int = 300
    learning_rate: float = 0.001
    c_grid: tuple = FINANCIAL_C_GRID
    samples: int = 50
    eval_samples: int = 2000
    epsilons: tuple = (0.001, 0.01, 0.1)
    estimators: tuple = ("reparametrization", "score_function")
    seed: int = 0


@dataclass
class EfficacyReport:
    success: dict  # (estimator, epsilon) -> rate
    reduction: dict  # (estimator, epsilon) -> fraction of windows with |E - t| halved
    median_norm: dict
    seconds: dict  # estimator -> wall time
    tau: float
    runs: dict = field(default_factory=dict, repr=False)  # estimator -> SuiteRun

    def rows(self):
        for (est, eps), rate in sorted(self.success.items()):
            yield {"estimator": est, "epsilon": eps, "success_rate": rate,
                   "halved": self.reduction[(est, eps)], "median_norm": self.median_norm[(est, eps)]}


def attack_problems(model: ForecastModel, ws: D.WindowSet, cfg: EfficacyConfig):
    """Evenly spaced test windows and classification targets pointing away from the forecast.

    The threshold ``tau`` is the mean realized ``h``-step return over the test
    period.  A window forecast at or above ``tau`` is pushed to a Sell, else to
    a Buy.
    """
    test = ws.select("test")
    idx = np.linspace(0, len(test) - 1, cfg.windows).astype(int)
    X = test.inputs[idx]
    stat = Statistic("cum_return", cfg.h)
    tau = float(realized_cum_return(test, cfg.h).mean())
    est, _ = estimate_many(model, X, stat, TRIVIAL, cfg.forecast_samples, [cfg.seed] * len(X))
    buy, sell = classification_targets(tau, cfg.lam)
    targets = [AttackTarget(sell, "classification_sell", tau) if e >= tau else
               AttackTarget(buy, "classification_buy", tau) for e in est]
    ids = [test.window_ids[i] for i in idx]
    return X, stat, targets, ids, tau


def run_efficacy(model: ForecastModel, ws: D.WindowSet, cfg: EfficacyConfig | None = None) -> EfficacyReport:
    cfg = cfg or EfficacyConfig()
    X, stat, targets, ids, tau = attack_problems(model, ws, cfg)
    success, reduction, norms, secs, runs = {}, {}, {}, {}, {}
    for kind in cfg.estimators:
        t0 = time.perf_counter()
        ac = AttackConfig(iterations=cfg.iterations, learning_rate=cfg.learning_rate, c_grid=tuple(cfg.c_grid),
                          L=cfg.samples, eval_samples=cfg.eval_samples, estimator=kind, seed=cfg.seed)
        run: SuiteRun = run_suite(model, X, stat, TRIVIAL, targets, ac, window_ids=ids)
        secs[kind] = time.perf_counter() - t0
        runs[kind] = run
        for eps in cfg.epsilons:
            res = run.results(eps)
            success[(kind, eps)] = float(np.mean([r.success for r in res]))
            reduction[(kind, eps)] = float(np.mean([abs(r.achieved - r.target) <= 0.5 * abs(r.baseline - r.target)
                                                    for r in res]))
            norms[(kind, eps)] = float(np.median([r.norm for r in res]))
        log.info("%s attacks took %.1fs", kind, secs[kind])
    return EfficacyReport(success, reduction, norms, secs, tau, runs)


# ------------------------------------------------------------ training sanity


@dataclass
class Ar1TrainingConfig:
    """Plain AR(1) values (identity transform); ``windows`` sliding windows of
    ``window`` points for training and a separately seeded set for validation."""

    a: float = 0.7
    sigma: float = 0.1
    windows: int = 50_000
    window: int = 21
    n_series: int = 50
    val_windows: int = 10_000
    hidden: int = 8
    max_epochs: int = 30
    batch_size: int = 2048
    learning_rate: float = 0.01
    patience: int = 5
    data_seed: int = 11
    seed: int = 0


def ar1_windows(cfg: Ar1TrainingConfig, count: int, seed: int) -> np.ndarray:
    per = math.ceil(count / cfg.n_series)
    spec = D.SyntheticSpec(kind="ar1", a=cfg.a, sigma=cfg.sigma, length=per + cfg.window - 1,
                           n_series=cfg.n_series, seed=seed)
    rows = [np.lib.stride_tricks.sliding_window_view(s.values, cfg.window) for s in D.gen_ar1(spec)]
    return np.concatenate(rows)[:count].copy()


def train_ar1(cfg: Ar1TrainingConfig):
    tr_seqs = ar1_windows(cfg, cfg.windows, cfg.data_seed)
    va_seqs = ar1_windows(cfg, cfg.val_windows, cfg.data_seed + 1)
    model = init_model(cfg.hidden, 1, cfg.seed)
    tc = TrainConfig(learning_rate=cfg.learning_rate, batch_size=cfg.batch_size, patience=cfg.patience,
                     max_epochs=cfg.max_epochs, seed=cfg.seed)
    best, trace = train(model, tr_seqs, va_seqs, tc)
    return best, trace, va_seqs


def training_sanity(cfg: Ar1TrainingConfig | None = None, check_reproducible=True) -> dict:
    cfg = cfg or Ar1TrainingConfig()
    t0 = time.perf_counter()
    best, trace, va = train_ar1(cfg)
    out = {
        "val_nll": float(sequence_nll(best, va)),
        "analytic_nll": D.ar1_stationary_nll(cfg.sigma),
        "epochs": len(trace) - 1,
        "seconds": time.perf_counter() - t0,
        "config": asdict(cfg),
    }
    if check_reproducible:
        again, _, _ = train_ar1(cfg)
        out["bitwise_reproducible"] = all(np.array_equal(best.params[k], again.params[k]) for k in best.params)
    return out
