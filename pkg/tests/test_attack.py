import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from advforecast.attack import (
    AttackConfig,
    AttackResult,
    AttackTarget,
    Candidate,
    classification_targets,
    consumption_target,
    objective,
    pgd_attack,
    run_suite,
    select_c,
    target_met,
    trading_target,
    weighted_norm,
)
from advforecast.estimators import UnsupportedEstimatorError
from advforecast.sampling import TRIVIAL, Observation, Statistic, estimate


def test_weighted_norm_examples():
    x = np.full(100, 50.0)
    one = np.zeros(100)
    one[7] = 0.016 * 50.0
    assert weighted_norm(one, x) == pytest.approx(0.016)
    assert weighted_norm(np.full(100, 0.0016 * 50.0), x) == pytest.approx(0.016)
    assert weighted_norm(np.zeros(3), np.ones(3)) == 0.0
    with pytest.raises(ValueError):
        weighted_norm(np.ones(2), np.array([1.0, 0.0]))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 8, elements=st.floats(-5, 5)), arrays(np.float64, 8, elements=st.floats(0.1, 100)),
       st.floats(1e-3, 1e3))
def test_weighted_norm_scale_invariance(d, x, k):
    assert weighted_norm(k * d, k * x) == pytest.approx(weighted_norm(d, x), rel=1e-12, abs=1e-300)


def test_target_constructions():
    buy, sell = classification_targets(0.001, 0.03)
    assert buy == pytest.approx(0.031) and sell == pytest.approx(-0.029)
    assert classification_targets(0.2, 0.0) == (0.2, 0.2)
    assert trading_target(0.0, 0.1, 0.05) == pytest.approx(-0.005)
    assert trading_target(0.3, 0.1, 0.3) == 0.3
    with pytest.raises(ValueError):
        AttackTarget(float("nan"))
    with pytest.raises(ValueError):
        AttackTarget(0.1, "classification_buy")


def test_consumption_target(ar1):
    x = np.array([0.5, 1.0])
    t, y = consumption_target(ar1, x, 2, "over", L=2000)
    assert t == pytest.approx(1.5 * y)
    assert consumption_target(ar1, x, 2, "under", L=2000)[0] == pytest.approx(0.5 * y)
    with pytest.raises(ValueError):
        consumption_target(ar1, x, 2, "sideways")


def test_success_predicates():
    assert target_met(AttackTarget(0.03, "classification_buy", tau=0.0), 0.02, (0.01, 0.03))
    assert not target_met(AttackTarget(0.03, "classification_buy", tau=0.0), 0.02, (-0.01, 0.03))
    assert target_met(AttackTarget(-0.03, "classification_sell", tau=0.0), -0.02, (-0.03, -0.01))
    assert target_met(AttackTarget(-0.005, "trading_reversal", tau=0.0), -0.001, (-1, 1))
    assert target_met(AttackTarget(150.0, "consumption_over", reference=100.0), 121.0, (0, 0))
    assert not target_met(AttackTarget(50.0, "consumption_under", reference=100.0), 85.0, (0, 0))


def test_select_c_rules():
    mk = lambda c, n, phi: Candidate(c, np.zeros(1), n, 0.0, 0.0, phi)  # noqa: E731
    assert select_c([mk(1.0, 0.05, 0.2), mk(10.0, 0.09, 0.1), mk(100.0, 0.5, 0.0)], 0.1)[0] == 10.0
    assert select_c([mk(1.0, 0.05, 0.1), mk(10.0, 0.09, 0.1)], 0.1)[0] == 1.0
    c, best, ok = select_c([mk(1.0, 0.3, 0.1), mk(10.0, 0.2, 0.1)], 0.1)
    assert (c, ok) == (10.0, False)


def test_objective_decouples_at_zero_c(price_model, prices):
    d = np.linspace(-0.01, 0.01, len(prices))
    s = Statistic("cum_return", 3)
    v0, g0 = objective(price_model, prices, d, s, TRIVIAL, 0.02, 0.0)
    assert v0 == pytest.approx(weighted_norm(d, prices))
    np.testing.assert_allclose(g0, d / prices**2 / weighted_norm(d, prices))
    v1, _ = objective(price_model, prices, d, s, TRIVIAL, 0.02, 1.0)
    v2, _ = objective(price_model, prices, d, s, TRIVIAL, 0.02, 2.0)
    assert v2 - v0 == pytest.approx(2 * (v1 - v0), rel=1e-12)


def _small_config(**kw):
    base = dict(iterations=30, L=20, eval_samples=500, c_grid=(1.0, 100.0, 1e4), learning_rate=0.01, seed=3)
    base.update(kw)
    return AttackConfig(**base)


def test_self_target_needs_no_perturbation(price_model, prices):
    s = Statistic("cum_return", 3)
    cfg = _small_config(epsilon=1e-3)
    t = estimate(price_model, prices, s, L=cfg.eval_samples, seed=cfg.seed).value
    r = pgd_attack(price_model, prices, s, TRIVIAL, AttackTarget(t), cfg)
    assert r.norm < 1e-3 and r.success


def test_zero_budget_only_admits_zero(price_model, prices):
    r = pgd_attack(price_model, prices, Statistic("cum_return", 3), TRIVIAL, AttackTarget(0.5), _small_config(epsilon=0.0))
    assert r.norm == 0.0 and r.chosen_c == 0.0 and not r.success


def test_attack_iterates_stay_positive_and_results_serialize(price_model, prices, tmp_path):
    s = Statistic("cum_return", 3)
    cfg = _small_config(learning_rate=5.0, epsilon=10.0)
    r = pgd_attack(price_model, prices, s, TRIVIAL, AttackTarget(-0.9), cfg)
    for rows in r.traces.values():
        assert all(row[4] > 0 for row in rows)
    assert np.all(prices + r.delta > 0)
    assert weighted_norm(r.delta, prices) == pytest.approx(r.norm, abs=1e-12)
    back = AttackResult.from_dict(json.loads(r.to_json()))
    np.testing.assert_array_equal(back.delta, r.delta)
    assert back.traces.keys() == r.traces.keys()
    r.write_trace_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "iteration,c,objective,norm,phi,min_input"


def test_attack_is_deterministic_and_batch_independent(price_model, prices):
    s = Statistic("cum_return", 3)
    cfg = _small_config(iterations=10)
    X = np.stack([prices, prices * 1.2])
    tg = [AttackTarget(0.05), AttackTarget(-0.05)]
    a = run_suite(price_model, X, s, TRIVIAL, tg, cfg).results(0.1)
    b = run_suite(price_model, X, s, TRIVIAL, tg, cfg, chunk_windows=1).results(0.1)
    c = run_suite(price_model, X, s, TRIVIAL, tg, cfg).results(0.1)
    for u, v, w in zip(a, b, c):
        assert u.to_json() == w.to_json()
        np.testing.assert_allclose(u.delta, v.delta, rtol=0, atol=1e-12)
        assert u.chosen_c == v.chosen_c


def test_attack_moves_estimate_toward_target(price_model, prices):
    s = Statistic("cum_return", 3)
    r = pgd_attack(price_model, prices, s, TRIVIAL, AttackTarget(0.05), _small_config(epsilon=1.0, iterations=60))
    assert abs(r.achieved - 0.05) < abs(r.baseline - 0.05)


def test_bayesian_attack_and_score_function_restriction(price_model, prices):
    s = Statistic("cum_return", 3)
    obs = Observation(1, 1.0, relative=True)
    r = pgd_attack(price_model, prices, s, obs, AttackTarget(0.02), _small_config(iterations=5))
    assert np.isfinite(r.achieved)
    with pytest.raises(UnsupportedEstimatorError):
        pgd_attack(price_model, prices, s, obs, AttackTarget(0.02), _small_config(iterations=5, estimator="score"))


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(c_grid=())
    with pytest.raises(ValueError):
        AttackConfig(c_grid=(1.0, -1.0))
    with pytest.raises(ValueError):
        AttackConfig(iterations=0)
    e = AttackConfig.preset("electricity")
    assert len(e.c_grid) == 18 and e.learning_rate == 0.01
    assert AttackConfig.preset("financial").c_grid[-1] == 1e6
