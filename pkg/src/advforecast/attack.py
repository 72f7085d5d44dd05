"""Norm-constrained adversarial perturbations of a forecaster's input prefix.

The attack minimizes ``||delta||_x + c * (E[stat | x + delta] - t)^2`` by
projected first-order descent for every ``c`` on a grid, then keeps the
best final iterate whose price-relative norm fits the budget.  Many windows
and all grid values are optimized together as one batch of independent
problems; each problem draws its own noise stream, so the batch layout only
affects results through floating-point rounding in matrix products.  Reruns
with the same layout are bitwise identical.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .estimators import UnsupportedEstimatorError, gradient_batch, horizon, normalize_kind
from .optim import make_optimizer
from .sampling import (
    TRIVIAL,
    Observation,
    Statistic,
    confidence_interval,
    derive_seed,
    estimate,
    estimate_many,
)

log = logging.getLogger(__name__)

FINANCIAL_C_GRID = (1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3, 1e4, 1e5, 1e6)
ELECTRICITY_C_GRID = (0.1, 0.2, 0.3, 0.5, 0.7, 1, 2, 3, 5, 7, 10, 20, 30, 50, 70, 100, 200, 300)
CONSTRUCTIONS = (
    "classification_buy",
    "classification_sell",
    "trading_reversal",
    "consumption_over",
    "consumption_under",
    "explicit",
)


@dataclass
class AttackConfig:
    epsilon: float = 0.1
    c_grid: tuple = FINANCIAL_C_GRID
    learning_rate: float = 0.001
    iterations: int = 1000
    L: int = 50
    distance: str = "squared_error"
    optimizer: str = "rmsprop"
    seed: int = 0
    estimator: str = "reparametrization"
    eval_samples: int = 10_000
    level: float = 0.95
    floor: float = 1e-6
    positive: bool = True
    fresh_noise: bool = True

    def __post_init__(self):
        self.c_grid = tuple(float(c) for c in self.c_grid)
        if not self.c_grid or any(not c > 0 for c in self.c_grid):
            raise ValueError("c_grid must be non-empty and strictly positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.L < 1 or self.eval_samples < 2:
            raise ValueError("sample counts too small")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.distance != "squared_error":
            raise ValueError("only squared_error distance is supported")
        self.estimator = normalize_kind(self.estimator)

    @classmethod
    def preset(cls, name: str, **overrides) -> "AttackConfig":
        if name == "financial":
            base = dict(c_grid=FINANCIAL_C_GRID, learning_rate=0.001)
        elif name == "electricity":
            base = dict(c_grid=ELECTRICITY_C_GRID, learning_rate=0.01)
        else:
            raise ValueError(f"unknown attack preset {name!r}")
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class AttackTarget:
    t: float
    construction: str = "explicit"
    tau: float | None = None  # decision threshold for classification and trading
    reference: float | None = None  # unperturbed y* for consumption attacks

    def __post_init__(self):
        if not math.isfinite(self.t):
            raise ValueError("target must be finite")
        if self.construction not in CONSTRUCTIONS:
            raise ValueError(f"unknown target construction {self.construction!r}")
        if self.construction.startswith(("classification", "trading")) and self.tau is None:
            raise ValueError(f"{self.construction} needs tau")
        if self.construction.startswith("consumption") and self.reference is None:
            raise ValueError(f"{self.construction} needs the reference value")


def classification_targets(tau: float, lam: float = 0.03) -> tuple[float, float]:
    """``(tau + lam, tau - lam)`` for the buy and sell attacks."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return tau + lam, tau - lam


def trading_target(tau: float, alpha: float, chi_ground_truth: float) -> float:
    return tau - alpha * (chi_ground_truth - tau)


def consumption_target(model, x, h, direction, L=10_000, seed=0, obs: Observation = TRIVIAL) -> tuple[float, float]:
    """``(target, y_star)`` with ``y_star`` the estimated ``E[y_h | x]``."""
    factor = {"over": 1.5, "under": 0.5}.get(direction)
    if factor is None:
        raise ValueError("direction must be 'over' or 'under'")
    y_star = estimate(model, x, Statistic("coordinate", h), obs, L, seed).value
    return factor * y_star, y_star


def make_target(construction, t, tau=None, reference=None) -> AttackTarget:
    return AttackTarget(float(t), construction, tau, reference)


def target_met(target: AttackTarget, achieved: float, ci: tuple[float, float]) -> bool:
    """Attack-specific success predicate (the norm budget is checked separately)."""
    kind = target.construction
    if kind == "classification_buy":
        return ci[0] > target.tau
    if kind == "classification_sell":
        return ci[1] < target.tau
    if kind == "trading_reversal":
        return np.sign(achieved - target.tau) == np.sign(target.t - target.tau) != 0
    if kind == "consumption_over":
        return achieved >= 1.2 * target.reference
    if kind == "consumption_under":
        return achieved <= 0.8 * target.reference
    return abs(achieved - target.t) <= 0.5 * (ci[1] - ci[0])


# ---------------------------------------------------------------- norm


def weighted_norm(delta, x) -> float:
    """``sqrt(sum((delta_i / x_i)^2))``."""
    delta = np.asarray(delta, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if delta.shape != x.shape:
        raise ValueError("delta and x must have the same shape")
    if np.any(x == 0):
        raise ValueError("weighted norm undefined for zero inputs")
    return float(np.sqrt(np.sum((delta / x) ** 2)))


def _norms(D, X):
    return np.sqrt(np.sum((D / X) ** 2, axis=1))


def _norm_grads(D, X, norms):
    safe = np.where(norms > 0, norms, 1.0)[:, None]
    return np.where(norms[:, None] > 0, D / (X * X) / safe, 0.0)


def objective(model, x, delta, stat, obs, target: float, c, L=50, seed=0, estimator="reparametrization"):
    """``(value, gradient)`` of the penalized objective at ``delta`` for one noise draw."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    delta = np.asarray(delta, dtype=np.float64).reshape(1, -1)
    vals, grads = gradient_batch(model, x, delta, stat, obs, [seed], L, estimator)
    nrm = _norms(delta, x)
    diff = vals[0] - target
    value = float(nrm[0] + c * diff * diff)
    g = _norm_grads(delta, x, nrm)[0] + 2.0 * c * diff * grads[0]
    return value, g


# ---------------------------------------------------------------- result


@dataclass
class AttackResult:
    delta: np.ndarray
    norm: float
    achieved: float
    phi: float
    success: bool
    chosen_c: float
    epsilon: float
    target: float
    baseline: float
    ci: tuple
    estimator: str
    window_id: str = ""
    construction: str = "explicit"
    traces: dict = field(default_factory=dict)  # c -> list of (iteration, objective, norm, phi, min_input)
    flagged: list = field(default_factory=list)  # c values aborted on non-finite numbers

    @property
    def baseline_phi(self):
        return (self.baseline - self.target) ** 2

    def to_dict(self, with_traces=True):
        d = {
            "window_id": self.window_id,
            "estimator": self.estimator,
            "construction": self.construction,
            "epsilon": self.epsilon,
            "target": self.target,
            "delta": [float(v) for v in self.delta],
            "norm": self.norm,
            "achieved": self.achieved,
            "baseline": self.baseline,
            "phi": self.phi,
            "ci": [float(v) for v in self.ci],
            "success": bool(self.success),
            "chosen_c": self.chosen_c,
            "flagged": list(self.flagged),
        }
        if with_traces:
            d["traces"] = {repr(c): [list(map(float, row)) for row in rows] for c, rows in self.traces.items()}
        return d

    def to_json(self, with_traces=True) -> str:
        return json.dumps(self.to_dict(with_traces), sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "AttackResult":
        traces = {float(c): [tuple(r) for r in rows] for c, rows in d.get("traces", {}).items()}
        return cls(np.asarray(d["delta"], dtype=np.float64), d["norm"], d["achieved"], d["phi"], d["success"],
                   d["chosen_c"], d["epsilon"], d["target"], d["baseline"], tuple(d["ci"]), d["estimator"],
                   d.get("window_id", ""), d.get("construction", "explicit"), traces, list(d.get("flagged", [])))

    def write_trace_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "c", "objective", "norm", "phi", "min_input"])
            for c in sorted(self.traces):
                for row in self.traces[c]:
                    w.writerow([int(row[0]), repr(c)] + [repr(float(v)) for v in row[1:]])


# ---------------------------------------------------------------- engine


@dataclass
class Candidate:
    c: float
    delta: np.ndarray
    norm: float
    achieved: float
    se: float
    phi: float


def select_c(candidates: list[Candidate], epsilon: float) -> tuple[float, Candidate, bool]:
    """Best admissible candidate by ``phi`` (ties toward smaller ``c``).

    Returns ``(chosen_c, candidate, admissible)``; with nothing inside the
    budget the smallest-norm candidate is returned with ``admissible=False``.
    """
    if not candidates:
        raise ValueError("no candidates")
    ok = [k for k in candidates if k.norm <= epsilon]
    if ok:
        best = min(ok, key=lambda k: (k.phi, k.c))
        return best.c, best, True
    best = min(candidates, key=lambda k: (k.norm, k.c))
    return best.c, best, False


@dataclass
class SuiteRun:
    """Optimization output for a set of windows, before ``epsilon`` selection."""

    X: np.ndarray
    targets: list
    window_ids: list
    candidates: list  # per window: list[Candidate] (c = 0 is the unperturbed input)
    traces: list  # per window: dict c -> rows
    flagged: list  # per window: list of c
    config: AttackConfig
    estimator: str

    def results(self, epsilon: float) -> list[AttackResult]:
        out = []
        L = self.config.eval_samples
        for w, cands in enumerate(self.candidates):
            c, best, admissible = select_c(cands, epsilon)
            ci = confidence_interval(best.achieved, best.se, L, self.config.level)
            tgt = self.targets[w]
            success = bool(admissible and best.norm <= epsilon and target_met(tgt, best.achieved, ci))
            base = next(k for k in cands if k.c == 0.0)
            out.append(AttackResult(
                best.delta.copy(), best.norm, best.achieved, best.phi, success, c, float(epsilon), tgt.t,
                base.achieved, ci, self.estimator, self.window_ids[w], tgt.construction,
                self.traces[w], self.flagged[w],
            ))
        return out


def _evaluate_problems(model, X, D, stat, obs, seeds, L, kind):
    """Batched estimates/gradients; isolates problems whose numbers blow up."""
    try:
        return gradient_batch(model, X, D, stat, obs, seeds, L, kind), np.zeros(len(X), dtype=bool)
    except UnsupportedEstimatorError:
        raise
    except (FloatingPointError, ValueError):
        pass
    vals, grads = np.full(len(X), np.nan), np.full_like(X, np.nan)
    bad = np.zeros(len(X), dtype=bool)
    for p in range(len(X)):
        try:
            v, g = gradient_batch(model, X[p : p + 1], D[p : p + 1], stat, obs, seeds[p : p + 1], L, kind)
            vals[p], grads[p] = v[0], g[0]
        except UnsupportedEstimatorError:
            raise
        except (FloatingPointError, ValueError):
            bad[p] = True
    return (vals, grads), bad


def run_suite(model, X, stat, obs: Observation, targets: list[AttackTarget], config: AttackConfig,
              window_ids=None, window_seeds=None, chunk_windows=None) -> SuiteRun:
    """Optimize every (window, c) pair and evaluate all final iterates."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    W, n = X.shape
    if len(targets) != W:
        raise ValueError("one target per window required")
    if config.positive and np.any(X <= 0):
        raise ValueError("positivity constraint requires positive inputs")
    window_ids = list(window_ids) if window_ids is not None else [str(w) for w in range(W)]
    window_seeds = list(window_seeds) if window_seeds is not None else [derive_seed(config.seed, w) for w in range(W)]
    chunk = chunk_windows or W
    cands, traces, flagged = [], [], []
    for s in range(0, W, chunk):
        sl = slice(s, min(W, s + chunk))
        cw, tw, fw = _run_chunk(model, X[sl], stat, obs, targets[sl], config, window_seeds[sl])
        cands += cw
        traces += tw
        flagged += fw
    return SuiteRun(X, list(targets), window_ids, cands, traces, flagged, config, config.estimator)


def _run_chunk(model, Xw, stat, obs, targets, config, window_seeds):
    W, n = Xw.shape
    grid = config.c_grid
    C = len(grid)
    X = np.repeat(Xw, C, axis=0)
    cs = np.tile(np.asarray(grid), W)
    t = np.repeat([tg.t for tg in targets], C)
    pseeds = [(window_seeds[w], k) for w in range(W) for k in range(C)]
    D = np.zeros_like(X)
    active = np.ones(len(X), dtype=bool)
    opt = make_optimizer(config.optimizer, config.learning_rate)
    lower = (config.floor - 1.0) * X
    rows = np.zeros((config.iterations, len(X), 5))
    for it in range(config.iterations):
        it_seed = it if config.fresh_noise else 0
        seeds = [derive_seed(ws, k, it_seed) for ws, k in pseeds]
        idx = np.flatnonzero(active)
        (vals, grads), bad = _evaluate_problems(model, X[idx], D[idx], stat, obs, [seeds[i] for i in idx],
                                                config.L, config.estimator)
        nrm = _norms(D[idx], X[idx])
        diff = vals - t[idx]
        obj = nrm + cs[idx] * diff * diff
        g = _norm_grads(D[idx], X[idx], nrm) + (2.0 * cs[idx] * diff)[:, None] * grads
        bad |= ~np.isfinite(obj) | ~np.all(np.isfinite(g), axis=1)
        rows[it, :, 0] = it
        rows[it, idx, 1] = obj
        rows[it, idx, 2] = nrm
        rows[it, idx, 3] = diff * diff
        rows[it, idx, 4] = np.min(X[idx] + D[idx], axis=1)
        if np.any(bad):
            for p in idx[bad]:
                log.warning("problem %d aborted at iteration %d (non-finite)", p, it)
            active[idx[bad]] = False
            rows[it, idx[bad], 1:4] = np.nan
        full = np.zeros_like(D)
        ok = idx[~bad]
        full[ok] = g[~bad]
        newD = opt.step({"delta": D}, {"delta": full})["delta"]
        newD[~active] = D[~active]
        if config.positive:
            newD = np.maximum(newD, lower)
        D = newD
        if not active.any():
            break
    stop = it + 1
    # final iterates plus the unperturbed input, all scored on the same eval noise
    cand_D = np.concatenate([D, np.zeros((W, n))])
    cand_X = np.concatenate([X, Xw])
    m = horizon(stat, obs)
    vals, ses = estimate_many(model, cand_X + cand_D, stat, obs, config.eval_samples,
                              [config.seed] * len(cand_X), m)
    cand_norms = _norms(cand_D, cand_X)
    cands, traces, flagged = [], [], []
    for w in range(W):
        lst, tr, fl = [], {}, []
        for k, c in enumerate(grid):
            p = w * C + k
            phi = (vals[p] - targets[w].t) ** 2
            lst.append(Candidate(c, D[p].copy(), float(cand_norms[p]), float(vals[p]), float(ses[p]), float(phi)))
            body = [tuple(r) for r in rows[:stop, p]]
            body.append((stop, cand_norms[p] + c * phi, cand_norms[p], phi, float(np.min(cand_X[p] + cand_D[p]))))
            tr[c] = body
            if not active[p]:
                fl.append(c)
        q = W * C + w
        lst.append(Candidate(0.0, np.zeros(n), 0.0, float(vals[q]), float(ses[q]), float((vals[q] - targets[w].t) ** 2)))
        cands.append(lst)
        traces.append(tr)
        flagged.append(fl)
    return cands, traces, flagged


def pgd_attack(model, x, stat: Statistic, obs: Observation, target, config: AttackConfig,
               window_seed=None) -> AttackResult:
    """Attack a single input prefix at ``config.epsilon``."""
    if not isinstance(target, AttackTarget):
        target = AttackTarget(float(target))
    seeds = None if window_seed is None else [window_seed]
    run = run_suite(model, np.asarray(x, dtype=np.float64).reshape(1, -1), stat, obs, [target], config,
                    window_seeds=seeds)
    return run.results(config.epsilon)[0]


def results_to_jsonl(results: list[AttackResult], path, with_traces=False):
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(r.to_json(with_traces) + "\n")


def config_dict(config: AttackConfig) -> dict:
    d = asdict(config)
    d["c_grid"] = list(d["c_grid"])
    return d
