import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from advforecast import autodiff as ad

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)
vec = arrays(np.float64, st.integers(1, 6), elements=finite)


def test_plain_arrays_stay_off_tape():
    out = ad.add(ad.mul(np.ones(3), 2.0), 1.0)
    assert isinstance(out, np.ndarray)
    np.testing.assert_array_equal(out, 3.0)


def test_square_plus_product():
    val, (gx, gy) = ad.grad(lambda x, y: ad.sum_(x * x + x * y), np.array([1.0, 2.0]), np.array([3.0, -1.0]))
    assert val == pytest.approx(1 + 3 + 4 - 2)
    np.testing.assert_allclose(gx, [2 + 3, 4 - 1])
    np.testing.assert_allclose(gy, [1, 2])


def test_unreachable_input_has_zero_gradient():
    _, (gx, gy) = ad.grad(lambda x, y: ad.sum_(ad.exp(x)), np.zeros(2), np.ones(3))
    np.testing.assert_array_equal(gy, np.zeros(3))
    np.testing.assert_allclose(gx, 1.0)


def test_indicator_is_flat():
    _, (g,) = ad.grad(lambda x: ad.sum_(ad.mul(ad.indicator(x, 0.5), 3.0) + x), np.array([0.5, 0.2, 0.9]))
    np.testing.assert_array_equal(g, 1.0)


def test_maximum_tie_and_norm_origin_are_zero():
    _, (g,) = ad.grad(lambda x: ad.sum_(ad.maximum(x, 0.0)), np.array([0.0, 1.0, -1.0]))
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])
    _, (g,) = ad.grad(lambda x: ad.l2norm(x), np.zeros(3))
    np.testing.assert_array_equal(g, 0.0)


def test_domain_errors():
    with pytest.raises(ad.DomainError):
        ad.log(np.array([0.0]))
    with pytest.raises(ad.DomainError):
        ad.div(1.0, np.array([0.0, 1.0]))


def test_nonfinite_forward_rejected():
    with pytest.raises(ad.NonFiniteError):
        ad.grad(lambda x: ad.sum_(ad.exp(x)), np.array([1000.0]))


@settings(max_examples=40, deadline=None)
@given(vec)
def test_smooth_ops_match_finite_differences(v):
    def f(x):
        a = ad.tanh(x) * ad.sigmoid(x)
        b = ad.cumprod(ad.add(ad.exp(ad.mul(x, 0.1)), 0.5))
        return ad.sum_(a + ad.sqrt(ad.add(ad.square(x), 1.0))) + ad.sum_(ad.cumsum(b))

    rep = ad.finite_difference_check(f, [v])
    assert rep.ok(1e-6), rep.max_rel_error


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**16))
def test_lstm_cell_matches_finite_differences(batch, hidden, seed):
    rng = np.random.default_rng(seed)
    point = [rng.normal(size=(batch, 2)), rng.normal(size=(batch, hidden)), rng.normal(size=(batch, hidden)),
             rng.normal(size=(2, 4 * hidden)), rng.normal(size=(hidden, 4 * hidden)), rng.normal(size=4 * hidden)]

    def f(*args):
        h, c = ad.lstm_cell(*args)
        return ad.sum_(ad.mul(h, 1.3)) + ad.sum_(ad.square(c))

    assert ad.finite_difference_check(f, point, floor=1e-6).ok(1e-4)


def test_repeat_rows_and_stack():
    def f(a):
        r = ad.repeat_rows(a, 3)
        s = ad.stack([r[:, 0], r[:, 1]], axis=1)
        return ad.sum_(ad.mul(s, np.arange(12.0).reshape(6, 2)))

    a = np.arange(4.0).reshape(2, 2)
    _, (g,) = ad.grad(f, a)
    w = np.arange(12.0).reshape(6, 2)
    np.testing.assert_allclose(g, w.reshape(2, 3, 2).sum(axis=1))


def test_fancy_getitem_accumulates():
    _, (g,) = ad.grad(lambda x: ad.sum_(x[np.array([0, 0, 2])]), np.ones(3))
    np.testing.assert_array_equal(g, [2.0, 0.0, 1.0])


def test_extremum_gradient_goes_to_argmax():
    _, (g,) = ad.grad(lambda x: ad.sum_(ad.amax(x, axis=-1)), np.array([[1.0, 3.0, 2.0]]))
    np.testing.assert_array_equal(g, [[0.0, 1.0, 0.0]])
