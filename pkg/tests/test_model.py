import math

import numpy as np
import pytest

from advforecast import autodiff as ad
from advforecast.data import ReturnsTransform, ar1_model, ar1_stationary_nll
from advforecast.model import (
    TrainConfig,
    condition,
    init_model,
    load_checkpoint,
    log_density,
    nll,
    save_checkpoint,
    sequence_nll,
    step,
    train,
    zero_model,
)


def test_zero_model_density():
    m = zero_model(mu_bias=0.5, sigma_bias=math.log(2.0))
    _, gp = condition(m, np.array([1.0, 2.0]))
    assert float(gp.mu[0]) == 0.5 and float(gp.sigma[0]) == pytest.approx(2.0)
    lp = float(log_density(gp, np.array([0.5]))[0])
    assert lp == pytest.approx(-math.log(2.0) - 0.5 * math.log(2 * math.pi))


def test_step_validates_inputs(toy_model):
    state, _ = condition(toy_model, np.array([0.1]))
    with pytest.raises(ValueError):
        step(toy_model, state, np.array([np.nan]))
    with pytest.raises(ValueError):
        condition(toy_model, np.array([]))
    with pytest.raises(ValueError):
        step(init_model(3), state, np.array([0.0]))


def test_batched_condition_matches_rows(toy_model):
    X = np.random.default_rng(0).normal(size=(3, 5))
    _, gp = condition(toy_model, X)
    for r in range(3):
        _, g1 = condition(toy_model, X[r])
        assert float(g1.mu[0]) == pytest.approx(float(gp.mu[r]), abs=1e-14)


def test_nll_shape_errors(toy_model):
    with pytest.raises(ValueError):
        nll(toy_model, np.zeros((2, 3)), np.zeros((2, 4)))


def test_nll_gradient_finite_differences(toy_model):
    seqs = np.random.default_rng(2).normal(size=(3, 6))
    names = toy_model.param_names()
    rep = ad.finite_difference_check(lambda *ps: sequence_nll(toy_model, seqs, dict(zip(names, ps))),
                                     [toy_model.params[k] for k in names])
    assert rep.ok(1e-5)


def test_ar1_model_has_ar1_emission():
    m = ar1_model(0.7, 0.2, 0.1)
    for prev in (-2.0, 0.3, 5.0):
        _, gp = condition(m, np.array([9.0, prev]))
        assert float(gp.mu[0]) == pytest.approx(0.7 * prev + 0.2, rel=1e-6)
        assert float(gp.sigma[0]) == pytest.approx(0.1)


def test_ar1_model_attains_analytic_nll():
    rng = np.random.default_rng(5)
    x = np.zeros((400, 30))
    for t in range(1, 30):
        x[:, t] = 0.7 * x[:, t - 1] + 0.1 * rng.standard_normal(400)
    got = float(sequence_nll(ar1_model(0.7, 0.0, 0.1), x))
    assert got == pytest.approx(ar1_stationary_nll(0.1), abs=0.01)


def _ar_data(n, seed):
    rng = np.random.default_rng(seed)
    x = np.zeros((n, 12))
    x[:, 0] = rng.normal(0, 0.14, n)
    for t in range(1, 12):
        x[:, t] = 0.7 * x[:, t - 1] + 0.1 * rng.standard_normal(n)
    return x


def test_training_reduces_nll_and_is_reproducible():
    fit, val = _ar_data(600, 0), _ar_data(200, 1)
    cfg = TrainConfig(learning_rate=0.01, batch_size=128, patience=3, max_epochs=6, seed=4)
    a, trace = train(init_model(4, seed=1), fit, val, cfg)
    b, _ = train(init_model(4, seed=1), fit, val, cfg)
    assert trace[0]["epoch"] == 0
    assert min(r["val_nll"] for r in trace) < trace[0]["val_nll"]
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_training_rejects_empty_sets():
    with pytest.raises(ValueError):
        train(init_model(2), np.zeros((0, 4)), np.zeros((1, 4)))


def test_checkpoint_round_trip(tmp_path):
    m = init_model(3, layers=2, seed=7, transform=ReturnsTransform(0.001, 0.02))
    save_checkpoint(m, tmp_path / "m.npz")
    back = load_checkpoint(tmp_path / "m.npz")
    assert (back.hidden, back.layers) == (3, 2)
    assert back.transform == m.transform
    for k in m.params:
        np.testing.assert_array_equal(back.params[k], m.params[k])
