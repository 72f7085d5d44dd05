import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advforecast.data import ar1_oracle
from advforecast.sampling import (
    TRIVIAL,
    DegenerateObservationError,
    Observation,
    Statistic,
    apply_observation,
    batch_to_csv,
    batch_to_json,
    bayes_expectation,
    confidence_interval,
    draw_noise,
    estimate,
    estimate_many,
    eval_statistic,
    mc_expectation,
    sample_batch,
    sample_reparam,
)


def test_noise_is_prefix_stable():
    big, small = draw_noise(10, 4, 3), draw_noise(6, 4, 3)
    np.testing.assert_array_equal(big.eta[:6], small.eta)
    assert not np.array_equal(draw_noise(6, 4, 4).eta, small.eta)


def test_statistic_parsing_and_validation():
    s = Statistic.parse("european_call:10:1.02")
    assert (s.kind, s.h, s.pi) == ("european_call", 10, 1.02)
    assert Statistic.parse(str(s)) == s
    for bad in ("cum_return:0", "limit_buy:3", "nope:2"):
        with pytest.raises(ValueError):
            Statistic.parse(bad)


def test_observation_parsing():
    assert Observation.parse("none").trivial
    o = Observation.parse("coordinate:2:1.05:relative")
    assert (o.index, o.value, o.relative) == (2, 1.05, True)
    assert Observation.parse(str(o)) == o
    with pytest.raises(ValueError):
        Observation.parse("coordinate:0:1")


def test_statistic_values():
    y = np.array([[11.0, 9.0, 12.0]])
    x_last = np.array([10.0])
    assert eval_statistic(Statistic("cum_return", 3), y, x_last)[0] == pytest.approx(0.2)
    assert eval_statistic(Statistic("european_call", 2, 0.95), y, x_last)[0] == pytest.approx(0.0)
    assert eval_statistic(Statistic("european_put", 2, 0.95), y, x_last)[0] == pytest.approx(0.05)
    assert eval_statistic(Statistic("limit_sell", 2, 1.1), y, x_last)[0] == 1.0
    assert eval_statistic(Statistic("limit_buy", 2, 0.85), y, x_last)[0] == 0.0
    assert eval_statistic(Statistic("coordinate", 2), y, x_last)[0] == 9.0
    with pytest.raises(ValueError):
        eval_statistic(Statistic("cum_return", 4), y, x_last)
    with pytest.raises(ValueError):
        eval_statistic(Statistic("cum_return", 1), y, np.array([0.0]))


def test_sample_reparam_matches_batch_row(price_model, prices):
    noise = draw_noise(5, 4, 2)
    b = sample_batch(price_model, prices, noise)
    t = sample_reparam(price_model, prices, noise.eta[3])
    np.testing.assert_allclose(t.values, b.values[3], rtol=1e-13)
    assert t.log_likelihood == pytest.approx(b.log_likelihood[3], rel=1e-12)
    assert np.all(b.values > 0)


def test_ar1_mc_matches_oracle(ar1):
    x = np.array([0.0, 0.8])
    e = estimate(ar1, x, Statistic("coordinate", 4), L=20_000, seed=1)
    mean, _ = ar1_oracle(0.7, 0.1, 0.1, 0.8, 4)
    assert abs(e.value - mean) < 4 * e.se


def test_trivial_observation_reduces_to_mc(price_model, prices):
    b = sample_batch(price_model, prices, draw_noise(300, 5, 0))
    b2 = apply_observation(price_model, prices, b, TRIVIAL)
    s = Statistic("cum_return", 5)
    assert bayes_expectation(b2, s) == mc_expectation(b, s)
    assert np.all(b2.weights == 1.0)


def test_coordinate_observation_weights(ar1):
    x = np.array([0.0, 0.5])
    noise = draw_noise(4000, 3, 9)
    b = apply_observation(ar1, x, sample_batch(ar1, x, noise), Observation(1, 0.45))
    assert np.all(b.weights >= 0)
    np.testing.assert_array_equal(b.values[:, 0], 0.45)
    est, _ = bayes_expectation(b, Statistic("coordinate", 3))
    assert est == pytest.approx(0.7**2 * 0.45 + 0.1 * 1.7, abs=0.01)
    doubled = b.with_log_weights(b.log_weights + np.log(2.0))
    assert bayes_expectation(doubled, Statistic("coordinate", 3))[0] == pytest.approx(est, rel=1e-14)


def test_far_observation_is_degenerate(ar1):
    x = np.array([0.0, 0.5])
    b = sample_batch(ar1, x, draw_noise(10, 2, 0))
    with pytest.raises(DegenerateObservationError):
        apply_observation(ar1, x, b, Observation(1, 1e6))


def test_bayes_estimate_stays_in_range(ar1):
    x = np.array([0.0, 0.5])
    b = apply_observation(ar1, x, sample_batch(ar1, x, draw_noise(50, 3, 4)), Observation(2, 0.5))
    chi = eval_statistic(Statistic("coordinate", 3), b.values, np.full(50, 0.5))
    est, se = bayes_expectation(b, Statistic("coordinate", 3))
    assert chi.min() <= est <= chi.max() and se >= 0


def test_confidence_interval():
    lo, hi = confidence_interval(1.0, 0.1, 1000)
    assert lo == pytest.approx(1.0 - 0.19623, abs=1e-4) and hi == pytest.approx(2.0 - lo)
    assert confidence_interval(1.0, 0.0, 10) == (1.0, 1.0)
    with pytest.raises(ValueError):
        confidence_interval(1.0, 0.1, 1)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 7), st.integers(0, 1000))
def test_estimate_many_independent_of_chunking(chunk, seed):
    from advforecast.data import ar1_model

    m = ar1_model(0.5, 0.0, 0.2)
    X = np.random.default_rng(seed).normal(size=(7, 3))
    seeds = list(range(seed, seed + 7))
    a = estimate_many(m, X, Statistic("coordinate", 2), TRIVIAL, 20, seeds)
    b = estimate_many(m, X, Statistic("coordinate", 2), TRIVIAL, 20, seeds, chunk_rows=20 * chunk)
    np.testing.assert_array_equal(a[0], b[0])


def test_export(tmp_path, price_model, prices):
    b = sample_batch(price_model, prices, draw_noise(3, 2, 0))
    batch_to_csv(b, tmp_path / "b.csv")
    rows = list(csv.DictReader(open(tmp_path / "b.csv")))
    assert len(rows) == 6 and float(rows[0]["weight"]) == 1.0
    assert json.loads(batch_to_json(b))["values"][1][1] == b.values[1, 1]
