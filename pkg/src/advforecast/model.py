"""Recurrent forecaster with a Gaussian emission per step.

Hidden state ``h_i`` is produced by a stack of LSTM layers fed with the
previous value; two affine heads map the top-layer state to the mean and to
the log of the standard deviation.  All functions take an optional
``params`` dict which may hold tape variables instead of the model's arrays,
so the same code path serves inference, training and the attack.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import IdentityTransform, transform_from_dict
from .optim import clip_global_norm, make_optimizer

log = logging.getLogger(__name__)

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
CHECKPOINT_VERSION = 1


@dataclass
class ForecastModel:
    hidden: int
    layers: int
    params: dict
    transform: object = field(default_factory=IdentityTransform)

    def param_names(self):
        names = []
        for k in range(self.layers):
            names += [f"lstm{k}.w_in", f"lstm{k}.w_hid", f"lstm{k}.bias"]
        return names + ["mu.w", "mu.b", "sigma.w", "sigma.b"]

    def copy(self):
        return ForecastModel(self.hidden, self.layers, {k: v.copy() for k, v in self.params.items()}, self.transform)

    def n_params(self):
        return sum(v.size for v in self.params.values())


def init_model(hidden=25, layers=1, seed=0, transform=None) -> ForecastModel:
    """Uniform initialization in ``+-1/sqrt(hidden)``."""
    rng = np.random.Generator(np.random.Philox(seed))
    bound = 1.0 / math.sqrt(hidden)
    u = lambda *shape: rng.uniform(-bound, bound, size=shape)
    p = {}
    for k in range(layers):
        n_in = 1 if k == 0 else hidden
        p[f"lstm{k}.w_in"] = u(n_in, 4 * hidden)
        p[f"lstm{k}.w_hid"] = u(hidden, 4 * hidden)
        p[f"lstm{k}.bias"] = u(4 * hidden)
    p["mu.w"] = u(hidden)
    p["mu.b"] = np.array(0.0)
    p["sigma.w"] = u(hidden)
    p["sigma.b"] = np.array(0.0)
    return ForecastModel(hidden, layers, p, transform or IdentityTransform())


def zero_model(hidden=4, layers=1, mu_bias=0.0, sigma_bias=0.0, transform=None) -> ForecastModel:
    m = init_model(hidden, layers, 0, transform)
    p = {k: np.zeros_like(v) for k, v in m.params.items()}
    p["mu.b"] = np.array(float(mu_bias))
    p["sigma.b"] = np.array(float(sigma_bias))
    return ForecastModel(hidden, layers, p, m.transform)


@dataclass
class GaussianParams:
    mu: object
    sigma: object
    log_sigma: object = None

    def __post_init__(self):
        if self.log_sigma is None:
            self.log_sigma = ad.log(self.sigma)


def initial_state(model: ForecastModel, rows=1):
    z = np.zeros((rows, model.hidden))
    return tuple((z, z) for _ in range(model.layers))


def _check_state(model, state):
    if len(state) != model.layers:
        raise ValueError("state depth does not match the model")
    for h, c in state:
        if h.shape[-1] != model.hidden or c.shape[-1] != model.hidden:
            raise ValueError("state width does not match the model")


def advance(model, state, prev_value, params=None):
    """Feed one value (shape ``(B,)``) through the LSTM stack."""
    p = params or model.params
    x = ad.reshape(prev_value, (-1, 1))
    new = []
    for k, (h, c) in enumerate(state):
        h, c = ad.lstm_cell(x, h, c, p[f"lstm{k}.w_in"], p[f"lstm{k}.w_hid"], p[f"lstm{k}.bias"])
        new.append((h, c))
        x = h
    return tuple(new)


def emission(model, state, params=None) -> GaussianParams:
    p = params or model.params
    h = state[-1][0]
    mu = ad.add(ad.matmul(h, p["mu.w"]), p["mu.b"])
    log_sigma = ad.add(ad.matmul(h, p["sigma.w"]), p["sigma.b"])
    return GaussianParams(mu, ad.exp(log_sigma), log_sigma)


def step(model, state, prev_value, params=None):
    """One recurrence step; returns the new state and the emission it implies."""
    _check_state(model, state)
    pv = ad.value_of(prev_value)
    if not np.all(np.isfinite(pv)):
        raise ValueError("non-finite input value")
    if np.ndim(pv) == 0:
        prev_value = ad.reshape(prev_value, (1,))
    state = advance(model, state, prev_value, params)
    return state, emission(model, state, params)


def condition(model, observed, params=None):
    """Fold :func:`step` over an observed prefix (1-D, or 2-D batch of rows)."""
    obs = ad.value_of(observed)
    if obs.shape[-1] == 0:
        raise ValueError("empty prefix")
    if not np.all(np.isfinite(obs)):
        raise ValueError("non-finite observed value")
    if obs.ndim == 1:
        observed = ad.reshape(observed, (1, -1))
    rows = obs.shape[0] if obs.ndim == 2 else 1
    state = initial_state(model, rows)
    for t in range(obs.shape[-1]):
        state = advance(model, state, observed[:, t], params)
    return state, emission(model, state, params)


def log_density(params: GaussianParams, value):
    """Gaussian log-density of ``value`` under ``params``."""
    z = ad.mul(ad.sub(value, params.mu), ad.exp(ad.neg(params.log_sigma)))
    return ad.sub(ad.neg(params.log_sigma), ad.add(ad.mul(ad.square(z), 0.5), HALF_LOG_2PI))


def nll(model, inputs, targets, params=None):
    """Teacher-forced mean negative log-likelihood.

    ``inputs`` and ``targets`` have shape ``(B, T)``; the emission produced
    after feeding ``inputs[:, t]`` scores ``targets[:, t]``.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if inputs.shape != targets.shape:
        raise ValueError(f"misaligned inputs {inputs.shape} and targets {targets.shape}")
    B, T = inputs.shape
    state = initial_state(model, B)
    total = 0.0
    for t in range(T):
        state = advance(model, state, inputs[:, t], params)
        gp = emission(model, state, params)
        total = ad.add(total, ad.sum_(log_density(gp, targets[:, t])))
    return ad.mul(total, -1.0 / (B * T))


def sequence_nll(model, seqs, params=None):
    """Teacher-forced nll of full model-space sequences ``(B, T+1)``."""
    seqs = np.asarray(seqs, dtype=np.float64)
    return nll(model, seqs[:, :-1], seqs[:, 1:], params)


def nll_grad(model, seqs):
    tape = ad.Tape()
    pv = {k: tape.variable(v) for k, v in model.params.items()}
    loss = sequence_nll(model, seqs, pv)
    g = ad.backward(loss)
    return float(loss.value), {k: g[v] for k, v in pv.items()}


# ------------------------------------------------------------------ training


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 2048
    patience: int = 20
    max_epochs: int = 200
    optimizer: str = "rmsprop"
    seed: int = 0
    clip_norm: float = 10.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


def _eval_nll(model, seqs, chunk=8192):
    total, count = 0.0, 0
    for i in range(0, len(seqs), chunk):
        part = seqs[i : i + chunk]
        total += float(sequence_nll(model, part)) * part.shape[0] * (part.shape[1] - 1)
        count += part.shape[0] * (part.shape[1] - 1)
    return total / count


def train(model: ForecastModel, train_seqs, val_seqs, config: TrainConfig | None = None):
    """Minimize teacher-forced nll with early stopping on validation nll.

    Returns the best-validation model and a trace of per-epoch dicts
    (epoch 0 is the untrained model).
    """
    config = config or TrainConfig()
    train_seqs = np.asarray(train_seqs, dtype=np.float64)
    val_seqs = np.asarray(val_seqs, dtype=np.float64)
    if len(train_seqs) == 0 or len(val_seqs) == 0:
        raise ValueError("training and validation sets must be non-empty")
    rng = np.random.Generator(np.random.Philox(config.seed))
    opt = make_optimizer(config.optimizer, config.learning_rate)
    params = {k: v.copy() for k, v in model.params.items()}
    current = ForecastModel(model.hidden, model.layers, params, model.transform)
    best_val = _eval_nll(current, val_seqs)
    best = {k: v.copy() for k, v in params.items()}
    trace = [{"epoch": 0, "train_nll": _eval_nll(current, train_seqs), "val_nll": best_val}]
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_seqs))
        losses = []
        for i in range(0, len(order), config.batch_size):
            batch = train_seqs[order[i : i + config.batch_size]]
            loss, grads = nll_grad(current, batch)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            grads, _ = clip_global_norm(grads, config.clip_norm)
            current.params = opt.step(current.params, grads)
            losses.append(loss)
        val = _eval_nll(current, val_seqs)
        trace.append({"epoch": epoch, "train_nll": float(np.mean(losses)), "val_nll": val})
        log.info("epoch %d train %.5f val %.5f", epoch, trace[-1]["train_nll"], val)
        if val < best_val:
            best_val, since_best = val, 0
            best = {k: v.copy() for k, v in current.params.items()}
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    return ForecastModel(model.hidden, model.layers, best, model.transform), trace


# --------------------------------------------------------------- checkpoints


def save_checkpoint(model: ForecastModel, path):
    meta = {
        "version": CHECKPOINT_VERSION,
        "hidden": model.hidden,
        "layers": model.layers,
        "transform": model.transform.to_dict(),
    }
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **model.params)


def load_checkpoint(path) -> ForecastModel:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        params = {k: z[k].copy() for k in z.files if k != "__meta__"}
    return ForecastModel(meta["hidden"], meta["layers"], params, transform_from_dict(meta["transform"]))
