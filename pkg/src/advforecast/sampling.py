"""Trajectory sampling, statistics and Monte-Carlo / importance-sampling estimates.

Sampled outputs are written as ``u_i = mu(h_i) + eta_i * sigma(h_i)`` with a
noise matrix drawn up front, so the same rollout is both an ancestral sampler
and a differentiable function of the inputs for fixed noise.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from . import autodiff as ad
from .model import advance, emission, initial_state, log_density


class DegenerateObservationError(ValueError):
    """Every importance weight is zero."""


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed mixed from non-negative integers."""
    state = np.random.SeedSequence([int(p) for p in parts]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


# ------------------------------------------------------------------- types


@dataclass(frozen=True)
class NoiseMatrix:
    """Standard-normal draws, row-major from a Philox stream keyed by ``seed``.

    Rows are filled in order, so the first ``k`` rows of an ``(L, m)`` draw
    equal a ``(k, m)`` draw with the same seed.
    """

    eta: np.ndarray
    seed: int

    @property
    def L(self):
        return self.eta.shape[0]

    @property
    def m(self):
        return self.eta.shape[1]


def draw_noise(L: int, m: int, seed: int) -> NoiseMatrix:
    if L < 1 or m < 1:
        raise ValueError("L and m must be >= 1")
    return NoiseMatrix(rng_for(seed).standard_normal((L, m)), seed)


STAT_KINDS = ("cum_return", "european_call", "european_put", "limit_sell", "limit_buy", "coordinate")
_NEEDS_PI = ("european_call", "european_put", "limit_sell", "limit_buy")


@dataclass(frozen=True)
class Statistic:
    """A real functional of the output sequence; ``h`` is 1-based."""

    kind: str
    h: int
    pi: float | None = None

    def __post_init__(self):
        if self.kind not in STAT_KINDS:
            raise ValueError(f"unknown statistic {self.kind!r}")
        if self.h < 1:
            raise ValueError("horizon h must be >= 1")
        if self.kind in _NEEDS_PI and not (self.pi is not None and self.pi > 0):
            raise ValueError(f"{self.kind} needs a positive pi")

    @classmethod
    def parse(cls, text: str) -> "Statistic":
        """``kind:h`` or ``kind:h:pi``, e.g. ``european_call:10:1``."""
        parts = text.strip().split(":")
        pi = float(parts[2]) if len(parts) > 2 else None
        return cls(parts[0], int(parts[1]), pi)

    def __str__(self):
        return f"{self.kind}:{self.h}" + (f":{self.pi:g}" if self.pi is not None else "")

    @property
    def uses_reference(self):
        return self.kind != "coordinate"


@dataclass(frozen=True)
class Observation:
    """Conditioning event.  ``index is None`` is the trivially true event;
    otherwise output ``index`` (1-based) equals ``value`` (times the last
    observed input when ``relative``)."""

    index: int | None = None
    value: float | None = None
    relative: bool = False

    def __post_init__(self):
        if self.index is not None:
            if self.index < 1:
                raise ValueError("observation index is 1-based")
            if self.value is None or not math.isfinite(self.value):
                raise ValueError("observation value must be finite")

    @property
    def trivial(self):
        return self.index is None

    @classmethod
    def parse(cls, text: str) -> "Observation":
        """``none`` or ``coordinate:j:v`` with an optional ``:relative`` suffix."""
        text = text.strip()
        if text in ("", "none", "true"):
            return cls()
        parts = text.split(":")
        if parts[0] != "coordinate" or len(parts) < 3:
            raise ValueError(f"cannot parse observation {text!r}")
        return cls(int(parts[1]), float(parts[2]), len(parts) > 3 and parts[3] == "relative")

    def __str__(self):
        if self.trivial:
            return "none"
        return f"coordinate:{self.index}:{self.value!r}" + (":relative" if self.relative else "")


TRIVIAL = Observation()


@dataclass
class Trajectory:
    values: np.ndarray
    log_likelihood: float
    weight: float = 1.0


@dataclass
class TrajectoryBatch:
    values: np.ndarray  # (L, m), value space
    log_likelihood: np.ndarray  # (L,)
    log_weights: np.ndarray  # (L,)
    noise: NoiseMatrix
    input_ref: np.ndarray  # (n,)
    observation: Observation = TRIVIAL

    @property
    def L(self):
        return self.values.shape[0]

    @property
    def weights(self):
        return np.exp(self.log_weights)

    @property
    def x_last(self):
        return float(self.input_ref[-1])

    @property
    def trajectories(self) -> list[Trajectory]:
        w = self.weights
        return [Trajectory(self.values[l], float(self.log_likelihood[l]), float(w[l])) for l in range(self.L)]

    def with_log_weights(self, logw):
        return TrajectoryBatch(self.values, self.log_likelihood, np.asarray(logw, dtype=np.float64),
                               self.noise, self.input_ref, self.observation)

    def concat(self, other: "TrajectoryBatch") -> "TrajectoryBatch":
        eta = np.concatenate([self.noise.eta, other.noise.eta])
        return TrajectoryBatch(
            np.concatenate([self.values, other.values]),
            np.concatenate([self.log_likelihood, other.log_likelihood]),
            np.concatenate([self.log_weights, other.log_weights]),
            NoiseMatrix(eta, self.noise.seed), self.input_ref, self.observation,
        )


# ------------------------------------------------------------------ rollout


@dataclass
class Rollout:
    u: list  # model-space columns (R,)
    y: object  # value-space outputs (R, m)
    loglik: object  # (R,)
    logw: object  # (R,) or None for the trivial observation
    x_last: object  # (R,)


def rollout(model, x, eta, obs: Observation = TRIVIAL, fixed=None, params=None, want_loglik=True) -> Rollout:
    """Iterated prediction for ``P`` input rows with ``L = R / P`` samples each.

    ``x`` is ``(P, n)`` in value space (array or tape variable), ``eta`` is
    ``(R, m)``.  Row ``p * L + l`` of the output belongs to input row ``p``.
    When ``fixed`` (``(R, m)`` value-space outputs) is given those values are
    fed back instead of sampled ones, which is how the score-function path
    evaluates log-likelihoods of already drawn samples.  ``loglik`` is the
    value-space log-density (model-space density plus log-Jacobian).
    """
    tr = model.transform
    eta = np.asarray(eta, dtype=np.float64)
    xv = ad.value_of(x)
    P = xv.shape[0]
    R, m = eta.shape
    if R % P:
        raise ValueError("noise rows must be a multiple of input rows")
    L = R // P
    if not obs.trivial and obs.index > m:
        raise ValueError("observation index beyond horizon")
    if not np.all(np.isfinite(xv)):
        raise ValueError("non-finite input")

    u_in, ctx = tr.encode(x)
    state = initial_state(model, P)
    for t in range(ad.value_of(u_in).shape[1]):
        state = advance(model, state, u_in[:, t], params)
    if L > 1:
        state = tuple((ad.repeat_rows(h, L), ad.repeat_rows(c, L)) for h, c in state)
    ctx = tr.repeat_ctx(ctx, L)
    x_last = x[:, -1]
    if L > 1:
        x_last = ad.repeat_rows(x_last, L)
    gp = emission(model, state, params)

    prev = x_last
    us, ys = [], []
    loglik = 0.0
    logw = None
    for i in range(m):
        if not obs.trivial and i == obs.index - 1:
            target = ad.mul(x_last, obs.value) if obs.relative else np.full(R, obs.value)
            u_i, log_jac = tr.encode_step(target, prev, ctx)
            logw = ad.add(log_density(gp, u_i), log_jac)
            y_i = target
        elif fixed is not None:
            y_i = fixed[:, i]
            u_i, log_jac = tr.encode_step(y_i, prev, ctx)
            if want_loglik:
                loglik = ad.add(loglik, ad.add(log_density(gp, u_i), log_jac))
        else:
            u_i = ad.add(gp.mu, ad.mul(gp.sigma, eta[:, i]))
            y_i = tr.decode_step(u_i, prev, ctx)
            if want_loglik:
                _, log_jac = tr.encode_step(y_i, prev, ctx)
                loglik = ad.add(loglik, ad.add(log_density(gp, u_i), log_jac))
        if not np.all(np.isfinite(ad.value_of(y_i))):
            raise FloatingPointError(f"non-finite sample at output step {i + 1}")
        us.append(u_i)
        ys.append(y_i)
        prev = y_i
        if i < m - 1:
            state = advance(model, state, u_i, params)
            gp = emission(model, state, params)
    y = ad.stack(ys, axis=1)
    if not want_loglik:
        loglik = None
    elif not isinstance(loglik, ad.Var):
        loglik = np.broadcast_to(np.asarray(loglik, dtype=np.float64), (R,)).copy()
    return Rollout(us, y, loglik, logw, x_last)


def _as_rows(x):
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(1, -1) if x.ndim == 1 else x


def sample_reparam(model, x, eta_row) -> Trajectory:
    """One reparametrized trajectory for input prefix ``x`` and noise row ``eta_row``."""
    eta_row = np.asarray(eta_row, dtype=np.float64).reshape(1, -1)
    r = rollout(model, _as_rows(x), eta_row)
    return Trajectory(r.y[0].copy(), float(r.loglik[0]), 1.0)


def sample_batch(model, x, noise: NoiseMatrix, obs: Observation = TRIVIAL) -> TrajectoryBatch:
    """All ``noise.L`` trajectories for a single prefix, weighted by ``obs``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    r = rollout(model, x.reshape(1, -1), noise.eta, obs)
    logw = np.zeros(noise.L) if r.logw is None else np.asarray(r.logw, dtype=np.float64)
    return TrajectoryBatch(np.asarray(r.y), np.asarray(r.loglik), logw, noise, x, obs)


def apply_observation(model, x, batch: TrajectoryBatch, obs: Observation) -> TrajectoryBatch:
    """Reweight a prior batch by the observation.

    The trivial observation sets every weight to exactly 1.  A coordinate
    observation weights each trajectory by the predictive density of the
    observed value at that step and clamps the coordinate; later steps are
    regenerated from the same noise so they condition on the clamped value.
    """
    if obs.trivial:
        return TrajectoryBatch(batch.values, batch.log_likelihood, np.zeros(batch.L), batch.noise, batch.input_ref, obs)
    out = sample_batch(model, x, batch.noise, obs)
    if np.all(out.weights == 0):
        raise DegenerateObservationError("all importance weights are zero")
    return out


# --------------------------------------------------------------- statistics


def eval_statistic(stat: Statistic, y, x_last):
    """Statistic of value-space outputs ``y`` (``(m,)`` or ``(R, m)``)."""
    if isinstance(y, Trajectory):
        y = y.values
    yv = ad.value_of(y)
    single = yv.ndim == 1
    if single:
        y = ad.reshape(y, (1, -1))
        yv = yv.reshape(1, -1)
    if stat.h > yv.shape[1]:
        raise ValueError(f"horizon {stat.h} beyond trajectory length {yv.shape[1]}")
    if stat.uses_reference and np.any(ad.value_of(x_last) == 0):
        raise ValueError("reference value x_last must be non-zero")
    h = stat.h
    if stat.kind == "coordinate":
        out = y[:, h - 1]
    elif stat.kind in ("limit_sell", "limit_buy"):
        ratio = ad.value_of(ad.div(y[:, :h], ad.reshape(x_last, (-1, 1))))
        if stat.kind == "limit_sell":
            out = ad.indicator(ratio.max(axis=1), stat.pi, above=True)
        else:
            out = ad.indicator(ratio.min(axis=1), stat.pi, above=False)
    else:
        ratio = ad.div(y[:, h - 1], x_last)
        if stat.kind == "cum_return":
            out = ad.sub(ratio, 1.0)
        elif stat.kind == "european_call":
            out = ad.maximum(ad.sub(ratio, stat.pi), 0.0)
        else:
            out = ad.maximum(ad.sub(stat.pi, ratio), 0.0)
    if single:
        return float(ad.value_of(out)[0])
    return out


def batch_statistic(batch: TrajectoryBatch, stat: Statistic) -> np.ndarray:
    return np.asarray(eval_statistic(stat, batch.values, np.full(batch.L, batch.x_last)))


# -------------------------------------------------------------- estimators


@dataclass
class Estimate:
    value: float
    se: float
    L: int

    def ci(self, level=0.95):
        return confidence_interval(self.value, self.se, self.L, level)


def _mc(chi):
    L = len(chi)
    if L == 0:
        raise ValueError("empty batch")
    est = float(np.mean(chi))
    se = float(np.std(chi, ddof=1) / math.sqrt(L)) if L >= 2 else math.nan
    return est, se


def _weighted(chi, logw):
    logw = np.asarray(logw, dtype=np.float64)
    if len(chi) == 0:
        raise ValueError("empty batch")
    if not np.any(np.exp(logw) > 0):
        raise DegenerateObservationError("all importance weights are zero")
    if np.all(logw == logw[0]):
        # equal weights cancel exactly in the ratio
        return _mc(chi)
    w = np.exp(logw - np.max(logw))
    wn = w / w.sum()
    est = float(np.sum(wn * chi))
    est = min(max(est, float(np.min(chi))), float(np.max(chi)))
    L = len(chi)
    if L < 2:
        return est, math.nan
    var = L / (L - 1) * float(np.sum(wn * wn * (chi - est) ** 2))
    return est, math.sqrt(var)


def mc_expectation(batch: TrajectoryBatch, stat: Statistic) -> tuple[float, float]:
    """Plain Monte-Carlo mean and its standard error (weights ignored)."""
    return _mc(batch_statistic(batch, stat))


def bayes_expectation(batch: TrajectoryBatch, stat: Statistic) -> tuple[float, float]:
    """Self-normalized importance-sampling estimate and its linearized
    ratio-estimator standard error."""
    return _weighted(batch_statistic(batch, stat), batch.log_weights)


def confidence_interval(estimate, se, L, level=0.95) -> tuple[float, float]:
    """Student-t interval ``estimate +- t_{L-1,(1+level)/2} * se``."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if L < 2:
        raise ValueError("need L >= 2 for an interval")
    if se == 0:
        return float(estimate), float(estimate)
    half = float(sps.t.ppf(0.5 * (1.0 + level), L - 1)) * se
    return estimate - half, estimate + half


def estimate_many(model, X, stat: Statistic, obs: Observation, L: int, seeds, m=None, chunk_rows=200_000):
    """Estimates for several prefixes at once; prefix ``p`` uses noise seed ``seeds[p]``.

    Returns arrays ``(values, ses)``.  Results do not depend on how the
    prefixes are chunked.
    """
    X = _as_rows(X)
    m = m or (stat.h if obs.trivial else max(stat.h, obs.index))
    per = max(1, chunk_rows // L)
    vals, ses = np.empty(len(X)), np.empty(len(X))
    for s in range(0, len(X), per):
        Xc = X[s : s + per]
        eta = np.concatenate([draw_noise(L, m, seeds[s + p]).eta for p in range(len(Xc))])
        r = rollout(model, Xc, eta, obs, want_loglik=False)
        chi = np.asarray(eval_statistic(stat, r.y, r.x_last)).reshape(len(Xc), L)
        logw = None if r.logw is None else np.asarray(r.logw).reshape(len(Xc), L)
        for p in range(len(Xc)):
            v, e = _mc(chi[p]) if logw is None else _weighted(chi[p], logw[p])
            vals[s + p], ses[s + p] = v, e
    return vals, ses


def estimate(model, x, stat: Statistic, obs: Observation = TRIVIAL, L=10_000, seed=0, m=None) -> Estimate:
    """Monte-Carlo (or importance-sampling) estimate of ``E[stat]`` for one prefix."""
    v, se = estimate_many(model, x, stat, obs, L, [seed], m)
    return Estimate(float(v[0]), float(se[0]), L)


# ------------------------------------------------------------------- export


def batch_to_csv(batch: TrajectoryBatch, path):
    w = batch.weights
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["sample", "step", "value", "weight"])
        for l in range(batch.L):
            for i in range(batch.values.shape[1]):
                out.writerow([l, i + 1, repr(float(batch.values[l, i])), repr(float(w[l]))])


def batch_to_json(batch: TrajectoryBatch) -> str:
    return json.dumps({
        "seed": batch.noise.seed,
        "observation": str(batch.observation),
        "input": batch.input_ref.tolist(),
        "values": batch.values.tolist(),
        "log_likelihood": batch.log_likelihood.tolist(),
        "weights": batch.weights.tolist(),
    })
