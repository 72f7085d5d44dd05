"""Series I/O, preprocessing maps, windowing and synthetic generators.

The preprocessing maps (returns, normalization, average scaling) are written
with the generic ops of :mod:`advforecast.autodiff`, so the same code runs on
plain arrays and on a tape.  That is what lets the attack optimize a
perturbation in price space while the network consumes normalized returns.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)

# ------------------------------------------------------------ price <-> return


def to_returns(prices):
    """``r_i = p_i / p_{i-1} - 1`` along the last axis."""
    p = ad.value_of(prices)
    if p.shape[-1] < 2:
        raise ValueError("need at least two prices")
    if np.any(p <= 0):
        raise ValueError("prices must be positive")
    return ad.div(prices[..., 1:], prices[..., :-1]) - 1.0


def from_returns(p1, returns):
    """Inverse of :func:`to_returns`: ``p_k = p_1 * prod_{i<=k} (1 + r_i)``.

    ``p1`` is a scalar for 1-D returns or has one entry per row of 2-D returns.
    """
    factors = ad.add(returns, 1.0)
    if np.any(ad.value_of(factors) <= 0):
        raise ValueError("1 + r must be positive")
    head = ad.reshape(p1, ad.value_of(p1).shape + (1,))
    if ad.value_of(factors).shape[-1] == 0:
        return head
    growth = ad.cumprod(factors, axis=-1)
    return ad.concatenate([head, ad.mul(growth, head)], axis=-1)


def normalize(returns, mu, sigma):
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return ad.div(ad.sub(returns, mu), sigma)


def denormalize(values, mu, sigma):
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return ad.add(ad.mul(values, sigma), mu)


def scale_by_average(window):
    """Divide a window by its average ``v``; returns ``(window / v, v)``."""
    v = ad.mean(window, axis=-1)
    if np.any(ad.value_of(v) <= 0):
        raise ValueError("window average must be positive")
    vv = ad.reshape(v, np.shape(ad.value_of(v)) + (1,))
    return ad.div(window, vv), v


# ---------------------------------------------------------------- transforms
#
# A transform maps value-space inputs x (P, n) to the model-space sequence the
# network consumes, and maps sampled model-space outputs back to value space
# one step at a time.  ``ctx`` carries per-row state (e.g. the scale factor).


class IdentityTransform:
    name = "identity"

    def encode(self, x):
        return x, None

    def decode_step(self, u, prev, ctx):
        return u

    def encode_step(self, y, prev, ctx):
        return y, 0.0

    def encode_window(self, windows, n):
        return np.asarray(windows, dtype=np.float64)

    def repeat_ctx(self, ctx, L):
        return ctx

    def to_dict(self):
        return {"kind": self.name}


@dataclass
class ReturnsTransform:
    """Prices -> normalized returns; outputs are rebuilt as prices."""

    mu: float = 0.0
    sigma: float = 1.0
    name = "returns"

    def encode(self, x):
        return normalize(to_returns(x), self.mu, self.sigma), None

    def decode_step(self, u, prev, ctx):
        return prev * (1.0 + self.mu + self.sigma * u)

    def encode_step(self, y, prev, ctx):
        u = (y / prev - 1.0 - self.mu) / self.sigma
        return u, -ad.log(prev * self.sigma)

    def encode_window(self, windows, n):
        return ad.value_of(normalize(to_returns(np.asarray(windows, dtype=np.float64)), self.mu, self.sigma))

    def repeat_ctx(self, ctx, L):
        return ctx

    def to_dict(self):
        return {"kind": self.name, "mu": self.mu, "sigma": self.sigma}


class AverageScaleTransform:
    """Inputs divided by their average ``v``; predictions multiplied by ``v``."""

    name = "average"

    def encode(self, x):
        scaled, v = scale_by_average(x)
        return scaled, v

    def decode_step(self, u, prev, ctx):
        return u * ctx

    def encode_step(self, y, prev, ctx):
        return y / ctx, -ad.log(ctx)

    def encode_window(self, windows, n):
        w = np.asarray(windows, dtype=np.float64)
        v = w[:, :n].mean(axis=1, keepdims=True)
        if np.any(v <= 0):
            raise ValueError("window average must be positive")
        return w / v

    def repeat_ctx(self, ctx, L):
        return ad.repeat_rows(ctx, L) if L > 1 else ctx

    def to_dict(self):
        return {"kind": self.name}


def transform_from_dict(d: dict):
    kind = d.get("kind", "identity")
    if kind == "identity":
        return IdentityTransform()
    if kind == "returns":
        return ReturnsTransform(float(d["mu"]), float(d["sigma"]))
    if kind == "average":
        return AverageScaleTransform()
    raise ValueError(f"unknown transform {kind!r}")


# ---------------------------------------------------------------- series I/O


@dataclass
class PriceSeries:
    """One observed series.  Values may hold NaN for missing observations."""

    id: str
    dates: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.dates = np.asarray(self.dates, dtype="datetime64[D]")
        self.values = np.asarray(self.values, dtype=np.float64)
        if len(self.dates) != len(self.values):
            raise ValueError(f"{self.id}: dates and values differ in length")
        if len(self.dates) > 1 and np.any(np.diff(self.dates) <= np.timedelta64(0, "D")):
            raise ValueError(f"{self.id}: timestamps must be strictly increasing")

    def __len__(self):
        return len(self.values)


def read_csv(path) -> list[PriceSeries]:
    """Read ``date,id,value`` rows; an empty value marks a missing observation."""
    rows: dict[str, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) < {"date", "id", "value"}:
            raise ValueError(f"{path}: expected header date,id,value")
        for row in reader:
            raw = row["value"].strip()
            val = float(raw) if raw and raw.lower() != "nan" else math.nan
            rows.setdefault(row["id"], []).append((np.datetime64(row["date"], "D"), val))
    out = []
    for sid in sorted(rows):
        pts = sorted(rows[sid], key=lambda r: r[0])
        out.append(PriceSeries(sid, [p[0] for p in pts], [p[1] for p in pts]))
    return out


def write_csv(series: list[PriceSeries], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "id", "value"])
        for s in series:
            for d, v in zip(s.dates, s.values):
                w.writerow([str(d), s.id, "" if np.isnan(v) else repr(float(v))])


# ----------------------------------------------------------------- windowing


@dataclass(frozen=True)
class SplitRule:
    """Training covers ``[train_start, train_end]``; test targets fall in
    ``(train_end, test_end]``."""

    train_start: np.datetime64
    train_end: np.datetime64
    test_end: np.datetime64

    @classmethod
    def from_strings(cls, train_start, train_end, test_end):
        return cls(np.datetime64(train_start, "D"), np.datetime64(train_end, "D"), np.datetime64(test_end, "D"))

    def to_dict(self):
        return {"train_start": str(self.train_start), "train_end": str(self.train_end), "test_end": str(self.test_end)}


def study_periods(first_year: int, last_year: int, train_years=3, test_years=1) -> list[SplitRule]:
    """Rolling periods of ``train_years`` training years followed by a test
    year, with non-overlapping test years."""
    rules = []
    year = first_year + train_years
    while year + test_years - 1 <= last_year:
        rules.append(SplitRule(
            np.datetime64(f"{year - train_years}-01-01", "D"),
            np.datetime64(f"{year - 1}-12-31", "D"),
            np.datetime64(f"{year + test_years - 1}-12-31", "D"),
        ))
        year += test_years
    return rules


@dataclass
class WindowSample:
    id: str
    input: np.ndarray
    target: np.ndarray
    normalization: tuple[float, float]


@dataclass
class WindowSet:
    """Fixed-length windows cut from a set of series, with split labels."""

    inputs: np.ndarray  # (N, n)
    targets: np.ndarray  # (N, m)
    series_ids: np.ndarray  # (N,) str
    starts: np.ndarray  # (N,) index of the first input value in its series
    split: np.ndarray  # (N,) 'train' | 'val' | 'test'
    target_dates: np.ndarray  # (N, 2) first and last target date
    normalization: tuple[float, float] = (0.0, 1.0)
    rule: SplitRule | None = None

    def __len__(self):
        return len(self.inputs)

    @property
    def window_ids(self) -> list[str]:
        return [f"{s}:{i}" for s, i in zip(self.series_ids, self.starts)]

    def __getitem__(self, i) -> WindowSample:
        return WindowSample(self.window_ids[i], self.inputs[i], self.targets[i], self.normalization)

    def select(self, split: str) -> "WindowSet":
        mask = self.split == split
        return WindowSet(
            self.inputs[mask], self.targets[mask], self.series_ids[mask], self.starts[mask],
            self.split[mask], self.target_dates[mask], self.normalization, self.rule,
        )

    def full(self) -> np.ndarray:
        return np.concatenate([self.inputs, self.targets], axis=1)


def fit_normalization(series: list[PriceSeries], rule: SplitRule) -> tuple[float, float]:
    """Mean and standard deviation of returns dated inside the training period."""
    rets = []
    for s in series:
        ok = (s.dates >= rule.train_start) & (s.dates <= rule.train_end)
        v = s.values
        pair = ok[1:] & ok[:-1] & np.isfinite(v[1:]) & np.isfinite(v[:-1])
        if np.any(pair):
            rets.append(v[1:][pair] / v[:-1][pair] - 1.0)
    if not rets:
        raise ValueError("no training returns to normalize")
    r = np.concatenate(rets)
    sd = float(r.std())
    if sd <= 0:
        raise ValueError("training returns have zero variance")
    return float(r.mean()), sd


def make_windows(series: list[PriceSeries], n: int, m: int, rule: SplitRule, stride=1,
                 val_fraction=0.15, normalize_returns=True) -> WindowSet:
    """Cut sliding windows of ``n`` inputs and ``m`` targets.

    Training windows lie entirely inside the training period; test windows
    have every target inside the test period.  The chronologically last
    ``val_fraction`` of training windows becomes the validation split.
    Windows touching a missing observation are dropped.
    """
    width = n + m
    inputs, targets, ids, starts, split, tdates = [], [], [], [], [], []
    for s in series:
        if len(s) < width:
            log.warning("series %s shorter than one window (%d < %d); skipped", s.id, len(s), width)
            continue
        vals = np.lib.stride_tricks.sliding_window_view(s.values, width)[::stride]
        first = np.arange(0, len(s) - width + 1)[::stride]
        d0 = s.dates[first]
        t0 = s.dates[first + n]
        t1 = s.dates[first + width - 1]
        finite = np.all(np.isfinite(vals), axis=1)
        is_train = finite & (d0 >= rule.train_start) & (t1 <= rule.train_end)
        is_test = finite & (d0 >= rule.train_start) & (t0 > rule.train_end) & (t1 <= rule.test_end)
        for mask, label in ((is_train, "train"), (is_test, "test")):
            k = np.flatnonzero(mask)
            inputs.append(vals[k, :n])
            targets.append(vals[k, n:])
            ids.append(np.full(len(k), s.id, dtype=object))
            starts.append(first[k])
            split.append(np.full(len(k), label, dtype=object))
            tdates.append(np.stack([t0[k], t1[k]], axis=1))
    if not inputs:
        raise ValueError("no windows could be formed")
    ws = WindowSet(
        np.concatenate(inputs).astype(np.float64).reshape(-1, n),
        np.concatenate(targets).astype(np.float64).reshape(-1, m),
        np.concatenate(ids).astype(str),
        np.concatenate(starts).astype(np.int64),
        np.concatenate(split).astype(str),
        np.concatenate(tdates).reshape(-1, 2),
        rule=rule,
    )
    train_idx = np.flatnonzero(ws.split == "train")
    if len(train_idx) and val_fraction > 0:
        order = np.lexsort((ws.series_ids[train_idx], ws.target_dates[train_idx, 1]))
        n_val = int(math.ceil(val_fraction * len(train_idx)))
        ws.split[train_idx[order[len(order) - n_val :]]] = "val"
    if normalize_returns:
        try:
            ws.normalization = fit_normalization(series, rule)
        except ValueError:
            ws.normalization = (0.0, 1.0)
    return ws


def target_overlaps(ws: WindowSet) -> int:
    """Number of (train or val, test) window pairs of one series whose target
    date ranges intersect."""
    count = 0
    fit = (ws.split == "train") | (ws.split == "val")
    test = ws.split == "test"
    for sid in np.unique(ws.series_ids):
        same = ws.series_ids == sid
        a = ws.target_dates[fit & same]
        b = ws.target_dates[test & same]
        if len(a) == 0 or len(b) == 0:
            continue
        inter = (a[:, None, 0] <= b[None, :, 1]) & (b[None, :, 0] <= a[:, None, 1])
        count += int(inter.sum())
    return count


# ----------------------------------------------------------------- synthetic


@dataclass
class SyntheticSpec:
    """``ar1``: x_{t+1} = a x_t + b + sigma eta_t.
    ``ar1_returns``: the AR(1) recursion drives daily returns of a price.
    ``seasonal``: positive consumption-like series with a periodic profile."""

    kind: str = "ar1"
    a: float = 0.7
    b: float = 0.0
    sigma: float = 0.1
    length: int = 300
    n_series: int = 10
    seed: int = 0
    x0: float | None = None
    p0: float = 10.0
    start: str = "1990-01-01"
    period: int = 24
    amplitude: float = 0.5
    level: float = 100.0

    def __post_init__(self):
        if self.kind not in ("ar1", "ar1_returns", "seasonal"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if self.kind != "seasonal" and not abs(self.a) < 1:
            raise ValueError("|a| < 1 required for stationarity")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _series_rng(seed, i):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, i])))


def _ar1_path(a, b, sigma, x0, length, eta):
    x = np.empty(length)
    x[0] = x0
    for t in range(1, length):
        x[t] = a * x[t - 1] + b + sigma * eta[t - 1]
    return x


def gen_ar1(spec: SyntheticSpec) -> list[PriceSeries]:
    """Synthetic series set described by ``spec`` (all kinds)."""
    start = np.datetime64(spec.start, "D")
    dates = start + np.arange(spec.length)
    out = []
    for i in range(spec.n_series):
        rng = _series_rng(spec.seed, i)
        eta = rng.standard_normal(spec.length)
        if spec.kind == "seasonal":
            phase = rng.uniform(0, 2 * np.pi)
            lvl = spec.level * np.exp(0.3 * rng.standard_normal())
            t = np.arange(spec.length)
            prof = 1.0 + spec.amplitude * np.sin(2 * np.pi * t / spec.period + phase)
            vals = lvl * prof * np.exp(spec.sigma * eta)
        else:
            mean = spec.b / (1.0 - spec.a)
            x0 = mean if spec.x0 is None else spec.x0
            path = _ar1_path(spec.a, spec.b, spec.sigma, x0, spec.length, eta)
            if spec.kind == "ar1_returns":
                vals = spec.p0 * np.cumprod(1.0 + path)
            else:
                vals = path
        out.append(PriceSeries(f"S{i:03d}", dates, vals))
    return out


def ar1_oracle(a, b, sigma, x_last, n):
    """Closed-form ``E[y_n | x_last]`` and its derivative w.r.t. ``x_last``."""
    if n < 1:
        raise ValueError("n >= 1 required")
    if a == 1:
        return n * b + x_last, 1.0
    an = a**n
    return an * x_last + b * (1.0 - an) / (1.0 - a), an


def ar1_stationary_nll(sigma):
    """Expected per-step Gaussian negative log-likelihood of the true process."""
    return math.log(sigma * math.sqrt(2 * math.pi)) + 0.5


def ar1_model(a, b, sigma, kappa=1e-4, saturation=30.0):
    """Hand-set one-unit LSTM whose emission is ``N(a * prev + b, sigma^2)``.

    Input, output and forget gates are saturated (open, open, closed), so the
    cell forgets its past and ``h = tanh(tanh(kappa * prev))``, which is
    linear in ``prev`` up to a relative error of order ``kappa^2 prev^2``.
    """
    from .model import ForecastModel

    p = {
        "lstm0.w_in": np.array([[0.0, 0.0, kappa, 0.0]]),
        "lstm0.w_hid": np.zeros((1, 4)),
        "lstm0.bias": np.array([saturation, -saturation, 0.0, saturation]),
        "mu.w": np.array([a / kappa]),
        "mu.b": np.array(float(b)),
        "sigma.w": np.zeros(1),
        "sigma.b": np.array(math.log(sigma)),
    }
    return ForecastModel(hidden=1, layers=1, params=p, transform=IdentityTransform())


def write_manifest(spec: SyntheticSpec, path, extra=None):
    payload = {"synthetic": spec.to_dict()}
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


def read_manifest(path) -> SyntheticSpec:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return SyntheticSpec.from_dict(payload["synthetic"])
