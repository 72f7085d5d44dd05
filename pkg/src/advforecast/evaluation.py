"""Decision rules and scores computed from forecasts: interval classification,
long/short backtests, ranked probability scores and attack success curves."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

LABELS = ("Buy", "Sell", "Uncertain")


@dataclass(frozen=True)
class Classification:
    label: str
    interval: tuple
    tau: float


def classify(estimate: float, ci: tuple[float, float], tau: float) -> Classification:
    low, high = float(ci[0]), float(ci[1])
    if not low <= high:
        raise ValueError("interval must satisfy low <= high")
    if low > tau:
        label = "Buy"
    elif high < tau:
        label = "Sell"
    else:
        label = "Uncertain"
    return Classification(label, (low, high), float(tau))


# ------------------------------------------------------------------ backtest


@dataclass
class BacktestReport:
    h: int
    k: int
    step_returns: np.ndarray  # one per test step
    step_periods: list  # period label per step
    shortfall_steps: int = 0

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.step_returns)) if len(self.step_returns) else math.nan

    @property
    def period_means(self) -> dict:
        acc = defaultdict(list)
        for p, r in zip(self.step_periods, self.step_returns):
            acc[p].append(r)
        return {p: float(np.mean(v)) for p, v in sorted(acc.items())}

    @property
    def std(self) -> float:
        """Standard deviation of per-period mean returns (0 with one period)."""
        means = list(self.period_means.values())
        return float(np.std(means, ddof=1)) if len(means) > 1 else 0.0

    def row(self) -> dict:
        return {"h": self.h, "k": self.k, "mean_return": self.mean_return, "std": self.std,
                "steps": len(self.step_returns), "shortfall_steps": self.shortfall_steps}


def long_short_return(scores, realized, ids, k) -> tuple[float, bool]:
    """Return of one rebalancing step and whether the universe was short of ``2k``.

    Names are ranked by score (descending, ties by id); the top ``k`` are held
    long and the bottom ``k`` short with equal capital on both legs.
    """
    scores = np.asarray(scores, dtype=np.float64)
    realized = np.asarray(realized, dtype=np.float64)
    n = len(scores)
    if n == 0:
        return 0.0, True
    order = sorted(range(n), key=lambda i: (-scores[i], ids[i]))
    shortfall = n < 2 * k
    kk = min(k, n // 2) if shortfall else k
    if kk == 0:
        return 0.0, True
    longs, shorts = order[:kk], order[-kk:]
    return 0.5 * (float(np.mean(realized[longs])) - float(np.mean(realized[shorts]))), shortfall


def backtest_scores(steps, h, k) -> BacktestReport:
    """Backtest from precomputed scores.

    ``steps`` is an iterable of ``(period, ids, scores, realized)`` tuples, one per
    rebalancing date, where ``realized`` holds the ground-truth ``h``-step returns.
    """
    rets, periods, short = [], [], 0
    for period, ids, scores, realized in steps:
        r, sf = long_short_return(scores, realized, list(ids), k)
        if sf:
            short += 1
            log.warning("universe of %d names cannot fill %d long and %d short", len(ids), k, k)
        rets.append(r)
        periods.append(period)
    return BacktestReport(h, k, np.asarray(rets), periods, short)


def group_steps(ws, scores, realized):
    """Group window-level scores into rebalancing steps keyed by forecast origin date."""
    origin = ws.target_dates[:, 0]
    period = ws.rule.test_end.astype("datetime64[Y]").astype(int) + 1970 if ws.rule is not None else 0
    ids = np.asarray(ws.series_ids)
    steps = []
    for d in np.unique(origin):
        sel = np.flatnonzero(origin == d)
        steps.append((int(period), ids[sel].tolist(), np.asarray(scores)[sel], np.asarray(realized)[sel]))
    return steps


def realized_cum_return(ws, h) -> np.ndarray:
    """Ground-truth ``y_h / x_last - 1`` for each window."""
    x_last = ws.inputs[:, -1]
    return ws.targets[:, h - 1] / x_last - 1.0


def backtest(model, ws, h, k, L=1000, seed=0, scores=None) -> BacktestReport:
    """Long/short backtest ranking by the model's expected ``h``-step cumulated return."""
    from .sampling import Statistic, estimate_many

    if scores is None:
        scores, _ = estimate_many(model, ws.inputs, Statistic("cum_return", h), _trivial(), L,
                                  [seed] * len(ws), m=h)
    return backtest_scores(group_steps(ws, scores, realized_cum_return(ws, h)), h, k)


def _trivial():
    from .sampling import TRIVIAL

    return TRIVIAL


# ------------------------------------------------------------------ RPS


def default_edges(train_targets, bins=100) -> np.ndarray:
    """Interior bin edges at the 1..(bins-1) percent quantiles (duplicates removed)."""
    q = np.quantile(np.asarray(train_targets, dtype=np.float64), np.arange(1, bins) / bins)
    return np.unique(q)


@dataclass
class RpsConfig:
    bin_edges: np.ndarray
    reference: str = "climatology"

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=np.float64)
        if self.bin_edges.ndim != 1 or np.any(np.diff(self.bin_edges) <= 0):
            raise ValueError("bin edges must be strictly increasing")

    @property
    def n_bins(self):
        return len(self.bin_edges) + 1


def bin_probabilities(samples, config: RpsConfig, weights=None) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    if samples.size == 0:
        raise ValueError("need at least one sample")
    cat = np.searchsorted(config.bin_edges, samples, side="right")
    w = np.ones_like(samples) if weights is None else np.asarray(weights, dtype=np.float64)
    p = np.bincount(cat, weights=w, minlength=config.n_bins)
    return p / p.sum()


def rps_from_probs(p, truth, config: RpsConfig) -> float:
    if not math.isfinite(truth):
        raise ValueError("ground truth must be finite")
    onehot = np.zeros(config.n_bins)
    onehot[np.searchsorted(config.bin_edges, truth, side="right")] = 1.0
    return float(np.sum((np.cumsum(p) - np.cumsum(onehot)) ** 2))


def rps(samples, truth, config: RpsConfig, weights=None) -> float:
    return rps_from_probs(bin_probabilities(samples, config, weights), truth, config)


def rps_skill(model_probs, truths, reference_probs, config: RpsConfig) -> float:
    """Mean model RPS over mean reference RPS (lower is better; the reference scores 1)."""
    truths = np.asarray(truths, dtype=np.float64)
    if len(truths) == 0:
        raise ValueError("empty test set")
    ref = np.atleast_2d(reference_probs)
    if ref.shape[0] == 1:
        ref = np.repeat(ref, len(truths), axis=0)
    num = np.mean([rps_from_probs(p, t, config) for p, t in zip(model_probs, truths)])
    den = np.mean([rps_from_probs(p, t, config) for p, t in zip(ref, truths)])
    if den == 0:
        return 1.0 if num == 0 else math.inf
    return float(num / den)


def climatology(train_targets, config: RpsConfig) -> np.ndarray:
    return bin_probabilities(train_targets, config)


# ------------------------------------------------------------------ curves


@dataclass
class CurveRow:
    estimator: str
    epsilon: float
    success_rate: float
    std: float
    n: int


def attack_curves(results, epsilons, periods=None) -> list[CurveRow]:
    """Success rate per (estimator, epsilon) with the spread across periods.

    ``results`` maps ``(estimator, epsilon)`` to a list of AttackResult (same
    window order for every epsilon).  A window counts as a success at
    ``epsilon`` if it succeeded at any budget not larger than ``epsilon``.
    """
    eps = sorted(float(e) for e in epsilons)
    rows = []
    for est in sorted({k[0] for k in results}):
        hit = None
        for e in eps:
            res = results.get((est, e), [])
            if not res:
                continue
            cur = np.array([bool(r.success) for r in res])
            hit = cur if hit is None or len(hit) != len(cur) else (hit | cur)
            rate = float(hit.mean())
            std = 0.0
            if periods is not None and len(set(periods)) > 1:
                by = defaultdict(list)
                for p, s in zip(periods, hit):
                    by[p].append(s)
                std = float(np.std([np.mean(v) for v in by.values()], ddof=1))
            rows.append(CurveRow(est, e, rate, std, len(cur)))
    return rows


def relative_changes(results) -> np.ndarray:
    """Per-window ``achieved / baseline - 1`` (for consumption attacks)."""
    return np.array([r.achieved / r.baseline - 1.0 for r in results if r.baseline != 0])


def write_curves_csv(rows: list[CurveRow], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["estimator", "epsilon", "success_rate", "std", "n"])
        for r in rows:
            w.writerow([r.estimator, repr(r.epsilon), repr(r.success_rate), repr(r.std), r.n])


def write_backtest_csv(reports: list[BacktestReport], path, extra_columns=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        cols = ["h", "k", "mean_return", "std", "steps", "shortfall_steps"] + list(extra_columns or [])
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for rep in reports:
            row = rep.row() if isinstance(rep, BacktestReport) else rep
            w.writerow(row)


def summary_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o))
