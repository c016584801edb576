import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pnormreg.gamma_core import (GammaParams, SingularDerivativeError, first_order_additive_bound, gamma,
                                 gamma_prime, local_approx_bounds, log_derivative_ratio,
                                 power_gradient, rescale_bound_check, residual_value, safe_pow)

ps = st.floats(1.05, 16.0)
reals = st.floats(-1e3, 1e3, allow_nan=False)
nonneg = st.floats(0.0, 1e3)


@pytest.mark.parametrize("p,t,x,expected", [
    (3, 0, 2, 8.0),
    (2, 5, 3, 9.0),
    (4, 1, 0.5, 0.5),
    (4, 1, 2, 17.0),
])
def test_gamma_examples(p, t, x, expected):
    assert gamma(p, t, x) == pytest.approx(expected, rel=1e-15)


def test_gamma_vectorized_and_scalar():
    out = gamma(4, np.array([1.0, 1.0]), np.array([0.5, 2.0]))
    assert np.allclose(out, [0.5, 17.0])
    assert isinstance(gamma(4, 1.0, 2.0), float)


def test_gamma_rejects_bad_input():
    with pytest.raises(ValueError):
        gamma(3, -1.0, 1.0)
    with pytest.raises(ValueError):
        gamma(3, 1.0, np.nan)


@pytest.mark.parametrize("p,t,x,expected", [(4, 1, 2, 32.0), (3.5, 2.0, 0.0, 0.0), (2, 7, 3, 6.0)])
def test_gamma_prime_examples(p, t, x, expected):
    assert gamma_prime(p, t, x) == pytest.approx(expected, rel=1e-15)


def test_gamma_prime_singular_for_small_p():
    with pytest.raises(SingularDerivativeError):
        gamma_prime(1.5, 0.0, 0.0)


def test_residual_examples():
    prm = GammaParams.from_p(2.0)
    assert prm.res_coeff == pytest.approx(1 / 8)
    g = power_gradient(2.0, np.array([1.0]))
    assert residual_value(prm, g, np.array([1.0]), np.array([1.0])) == pytest.approx(1.875)
    assert residual_value(prm, g, np.array([1.0]), np.array([-1.0])) == pytest.approx(-2.125)
    assert residual_value(prm, g, np.array([1.0]), np.array([0.0])) == 0.0
    with pytest.raises(ValueError):
        residual_value(prm, g, np.array([1.0]), np.array([1.0, 2.0]))


def test_step_scale_value():
    for p in (1.5, 2.0, 3.0, 8.0):
        prm = GammaParams.from_p(p)
        assert prm.step_scale == pytest.approx(((p - 1) / (p * 4**p)) ** (1 / min(1, p - 1)))
        assert prm.q == pytest.approx(p / (p - 1))


def test_local_approx_examples():
    prm2, prm3 = GammaParams.from_p(2.0), GammaParams.from_p(3.0)
    assert local_approx_bounds(prm2, 1.0, 0.0) == (1.0, 1.0)
    # |x|^p + g d + c gamma: 1 + 2 + 1/8 and 1 + 2 + 4, bracketing |2|^2 = 4
    lo, hi = local_approx_bounds(prm2, 1.0, 1.0)
    assert lo == pytest.approx(3.125) and hi == pytest.approx(7.0)
    assert lo <= 4.0 <= hi
    lo, hi = local_approx_bounds(prm3, 0.0, 2.0)
    assert lo == pytest.approx(prm3.res_coeff * 8) and hi == pytest.approx(64.0)


def test_rescale_examples():
    assert rescale_bound_check(4, 1.0, 2.0, 1.0)
    assert rescale_bound_check(4, 1.0, 2.0, 0.0)
    assert gamma(4, 1.0, 1.0) == pytest.approx(2.0)
    assert 0.0625 * 17 <= gamma(4, 1.0, 1.0) <= 0.25 * 17
    assert rescale_bound_check(4, 1.0, 2.0, 0.5)


def test_safe_pow_edges():
    assert safe_pow(0.0, 2.5) == 0.0
    assert safe_pow(4.0, 0.5) == pytest.approx(2.0)
    assert np.all(np.isfinite(safe_pow(np.array([1e-300, 1e100]), 1.5)))
    assert safe_pow(1e-300, 2.0) == 0.0  # below the normal range: flushed


@settings(max_examples=300, deadline=None)
@given(ps, nonneg, reals, st.floats(0.0, 100.0))
def test_homogeneity(p, t, x, lam):
    lhs = gamma(p, lam * t, lam * x)
    rhs = lam**p * gamma(p, t, x)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-300)


@settings(max_examples=300, deadline=None)
@given(st.floats(2.0, 16.0), nonneg, reals)
def test_dominance(p, t, x):
    val = gamma(p, t, x)
    tiny = np.finfo(float).tiny  # values below the normal range may flush to zero
    assert val >= abs(x) ** p * (1 - 1e-12) - tiny
    assert val >= 0.5 * p * t ** (p - 2) * x * x * (1 - 1e-12) - tiny


@settings(max_examples=300, deadline=None)
@given(ps, st.floats(0.1, 10.0))
def test_c1_across_boundary(p, t):
    h = 1e-9 * t
    assert gamma(p, t, t - h) == pytest.approx(gamma(p, t, t + h), rel=1e-7)
    assert gamma_prime(p, t, t - h) == pytest.approx(gamma_prime(p, t, t + h), rel=1e-7)


@settings(max_examples=300, deadline=None)
@given(ps, st.floats(0.05, 5.0), st.floats(0.05, 5.0), st.booleans())
def test_derivative_matches_central_difference(p, t, ax, neg):
    x = -ax if neg else ax
    if abs(abs(x) - t) < 1e-3:
        return
    h = 1e-6
    num = (gamma(p, t, x + h) - gamma(p, t, x - h)) / (2 * h)
    assert num == pytest.approx(gamma_prime(p, t, x), rel=1e-6)


@settings(max_examples=500, deadline=None)
@given(st.floats(1.05, 16.0), reals, reals)
def test_local_approx_sandwich(p, x, d):
    prm = GammaParams.from_p(p)
    lo, hi = local_approx_bounds(prm, x, d)
    f = abs(x + d) ** p
    scale = max(f, abs(x) ** p, 1e-300)
    assert lo <= f + 1e-12 * scale
    assert f <= hi + 1e-12 * scale


@settings(max_examples=300, deadline=None)
@given(st.floats(2.0, 12.0), nonneg.map(lambda v: v / 100), reals.map(lambda v: v / 100),
       reals.map(lambda v: v / 100))
def test_first_order_additive(p, t, x, d):
    lhs = gamma(p, t, x + d)
    rhs = first_order_additive_bound(p, t, x, d)
    assert lhs <= rhs * (1 + 1e-12) + 1e-300


@settings(max_examples=300, deadline=None)
@given(ps, nonneg, reals.filter(lambda v: v != 0))
def test_log_derivative_ratio(p, t, x):
    if gamma(p, t, x) <= 1e-250:
        return
    ratio = log_derivative_ratio(p, t, x)
    assert min(2, p) * (1 - 1e-12) <= ratio <= max(2, p) * (1 + 1e-12)


@settings(max_examples=200, deadline=None)
@given(ps, st.floats(0, 1), nonneg, reals)
def test_rescale_bounds(p, lam, t, x):
    assert rescale_bound_check(p, t, x, lam, rtol=1e-10)


def test_constants_finite_for_extreme_p():
    for p in (1.01, 16.0, 64.0):
        prm = GammaParams.from_p(p)
        assert math.isfinite(prm.step_scale) and prm.step_scale > 0
    with pytest.raises(ValueError):
        GammaParams.from_p(1.0001)
    with pytest.raises(ValueError):
        GammaParams.from_p(1.0)
