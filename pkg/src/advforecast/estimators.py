"""Gradients of ``E[stat]`` with respect to an additive input perturbation.

Two estimators are provided.  The score-function estimator differentiates the
log-density of held-fixed samples; the reparametrization estimator
differentiates the sampled trajectories themselves (and, for a non-trivial
observation, the importance weights).  Both work on batches of independent
problems at once: row ``p`` of ``X``/``Delta`` gets its own noise stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial

import numpy as np

from . import autodiff as ad
from .sampling import (
    TRIVIAL,
    DegenerateObservationError,
    Observation,
    Statistic,
    draw_noise,
    eval_statistic,
    rollout,
)

KINDS = ("score_function", "reparametrization")


class UnsupportedEstimatorError(ValueError):
    """Score-function gradients are only defined here for the trivial observation."""


@dataclass
class GradientEstimate:
    grad: np.ndarray
    estimator_kind: str
    L: int
    seed: int
    value: float = math.nan

    def __post_init__(self):
        if self.estimator_kind not in KINDS:
            raise ValueError(f"unknown estimator kind {self.estimator_kind!r}")
        if not np.all(np.isfinite(self.grad)):
            raise FloatingPointError("non-finite gradient estimate")


def normalize_kind(kind: str) -> str:
    k = kind.lower().replace("-", "_")
    if k in ("score_function", "score", "sf", "reinforce"):
        return "score_function"
    if k in ("reparametrization", "reparameterization", "reparam", "pathwise"):
        return "reparametrization"
    raise ValueError(f"unknown estimator {kind!r}")


def horizon(stat: Statistic, obs: Observation) -> int:
    return stat.h if obs.trivial else max(stat.h, obs.index)


def batch_noise(seeds, L, m):
    return np.concatenate([draw_noise(L, m, int(s)).eta for s in seeds])


def _ratio(chi, logw, P, L):
    """Per-problem self-normalized mean; ``logw is None`` means equal weights."""
    chi = ad.reshape(chi, (P, L))
    if logw is None:
        return ad.mean(chi, axis=1)
    logw = ad.reshape(logw, (P, L))
    top = np.max(ad.value_of(logw), axis=1, keepdims=True)
    if not np.all(np.isfinite(top)) or np.any(np.exp(top) == 0):
        raise DegenerateObservationError("all importance weights are zero")
    w = ad.exp(ad.sub(logw, top))
    return ad.div(ad.sum_(ad.mul(w, chi), axis=1), ad.sum_(w, axis=1))


def values_batch(model, X, Delta, stat, obs, eta, L):
    """Monte-Carlo estimates at ``X + Delta`` for fixed noise (no tape)."""
    X = np.asarray(X, dtype=np.float64)
    xin = X + np.asarray(Delta, dtype=np.float64)
    r = rollout(model, xin, eta, obs, want_loglik=False)
    return np.asarray(_ratio(eval_statistic(stat, r.y, r.x_last), r.logw, X.shape[0], L))


def reparam_batch(model, X, Delta, stat, obs, eta, L):
    """Values ``(P,)`` and gradients ``(P, n)`` of the fixed-noise estimate."""
    X = np.asarray(X, dtype=np.float64)
    P = X.shape[0]
    tape = ad.Tape()
    D = tape.variable(np.asarray(Delta, dtype=np.float64))
    r = rollout(model, ad.add(X, D), eta, obs, want_loglik=False)
    est = _ratio(eval_statistic(stat, r.y, r.x_last), r.logw, P, L)
    if not isinstance(est, ad.Var):
        return np.asarray(est), np.zeros_like(X)
    g = ad.backward(ad.sum_(est))
    return est.value.copy(), g[D]


def score_batch(model, X, Delta, stat, obs, eta, L, baseline=0.0):
    """Score-function values and gradients for ``P`` problems.

    Samples are drawn at ``X + Delta`` and then held fixed in value space; the
    gradient is that of ``mean_l [stopgrad(chi_l) * log q(y_l) + chi_l]``.  The
    second term only matters for statistics that reference the last input
    value directly (it is the explicit dependence of ``chi`` on the input).
    ``baseline`` is subtracted from ``chi`` in the score term only; it is 0
    unless a caller asks otherwise.
    """
    if not obs.trivial:
        raise UnsupportedEstimatorError("score-function estimator requires the trivial observation")
    X = np.asarray(X, dtype=np.float64)
    Delta = np.asarray(Delta, dtype=np.float64)
    P = X.shape[0]
    ys = np.asarray(rollout(model, X + Delta, eta, want_loglik=False).y)
    tape = ad.Tape()
    D = tape.variable(Delta)
    r = rollout(model, ad.add(X, D), eta, fixed=ys)
    chi = eval_statistic(stat, ys, r.x_last)
    chi_v = ad.value_of(chi)
    surrogate = ad.add(ad.mul(r.loglik, chi_v - baseline), chi)
    est = chi_v.reshape(P, L).mean(axis=1)
    g = ad.backward(ad.sum_(surrogate), seed=1.0 / L)
    return est, g[D]


def gradient_batch(model, X, Delta, stat, obs, seeds, L, kind, chunk_rows=100_000, baseline=0.0):
    """Estimates and gradients for many problems; chunking does not change results."""
    kind = normalize_kind(kind)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Delta = np.zeros_like(X) if Delta is None else np.atleast_2d(np.asarray(Delta, dtype=np.float64))
    if kind == "score_function" and not obs.trivial:
        raise UnsupportedEstimatorError("score-function estimator requires the trivial observation")
    m = horizon(stat, obs)
    fn = reparam_batch if kind == "reparametrization" else partial(score_batch, baseline=baseline)
    per = max(1, chunk_rows // L)
    vals, grads = np.empty(len(X)), np.empty_like(X)
    for s in range(0, len(X), per):
        sl = slice(s, s + per)
        eta = batch_noise(seeds[sl], L, m)
        vals[sl], grads[sl] = fn(model, X[sl], Delta[sl], stat, obs, eta, L)
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient estimate")
    return vals, grads


def _single(kind, model, x, delta, stat, obs, L, seed):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    delta = np.zeros_like(x) if delta is None else np.asarray(delta, dtype=np.float64).reshape(-1)
    if delta.shape != x.shape:
        raise ValueError("delta and x must have the same length")
    v, g = gradient_batch(model, x[None], delta[None], stat, obs, [seed], L, kind)
    return GradientEstimate(g[0], kind, L, seed, float(v[0]))


def score_function_gradient(model, x, delta, stat, obs: Observation = TRIVIAL, L=50, seed=0) -> GradientEstimate:
    return _single("score_function", model, x, delta, stat, obs, L, seed)


def reparam_gradient(model, x, delta, stat, obs: Observation = TRIVIAL, L=50, seed=0) -> GradientEstimate:
    return _single("reparametrization", model, x, delta, stat, obs, L, seed)


def estimate_at(model, x, delta, stat, obs: Observation = TRIVIAL, L=50, seed=0) -> float:
    """The Monte-Carlo estimate whose exact gradient :func:`reparam_gradient` returns."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    delta = np.zeros_like(x) if delta is None else np.asarray(delta, dtype=np.float64).reshape(1, -1)
    eta = draw_noise(L, horizon(stat, obs), seed).eta
    return float(values_batch(model, x, delta, stat, obs, eta, L)[0])


# ------------------------------------------------------------ agreement


@dataclass
class AgreementReport:
    mean_score: np.ndarray
    mean_reparam: np.ndarray
    se_score: np.ndarray
    se_reparam: np.ndarray
    cosine: float
    within_3se: float  # fraction of coordinates
    var_score: float  # summed per-coordinate variance
    var_reparam: float
    trials: int
    L: int

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}


def estimator_agreement(model, x, stat, trials=200, L=1000, seed=0, obs: Observation = TRIVIAL) -> AgreementReport:
    """Compare both estimators over ``trials`` independent noise seeds."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    X = np.tile(x, (trials, 1))
    sf_seeds = [_trial_seed(seed, 0, t) for t in range(trials)]
    rp_seeds = [_trial_seed(seed, 1, t) for t in range(trials)]
    _, gs = gradient_batch(model, X, None, stat, obs, sf_seeds, L, "score_function")
    _, gr = gradient_batch(model, X, None, stat, obs, rp_seeds, L, "reparametrization")
    ms, mr = gs.mean(axis=0), gr.mean(axis=0)
    ss = gs.std(axis=0, ddof=1) / math.sqrt(trials)
    sr = gr.std(axis=0, ddof=1) / math.sqrt(trials)
    comb = np.sqrt(ss**2 + sr**2)
    diff = np.abs(ms - mr)
    within = np.where(comb > 0, diff <= 3 * comb, diff == 0)
    denom = np.linalg.norm(ms) * np.linalg.norm(mr)
    cosine = float(ms @ mr / denom) if denom > 0 else (1.0 if np.allclose(ms, mr) else 0.0)
    return AgreementReport(ms, mr, ss, sr, cosine, float(within.mean()),
                           float(gs.var(axis=0, ddof=1).sum()), float(gr.var(axis=0, ddof=1).sum()), trials, L)


def _trial_seed(seed, kind_index, t):
    from .sampling import derive_seed

    return derive_seed(seed, 7919 + kind_index, t)
