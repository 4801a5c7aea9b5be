import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate as si

from gasbody import quad


@pytest.mark.parametrize("f, lo, hi, expected", [
    (lambda v: np.exp(-v * v), 0.0, math.inf, math.sqrt(math.pi) / 2),
    (lambda v: v, 0.0, 1.0, 0.5),
    (lambda v: v * np.exp(-2 * v * v), 0.0, math.inf, 0.25),
    (lambda v: np.exp(-v * v), -math.inf, math.inf, math.sqrt(math.pi)),
    (lambda v: np.exp(v), -math.inf, 0.0, 1.0),
])
def test_closed_forms(f, lo, hi, expected):
    res = quad.integrate(f, lo, hi, 1e-10)
    assert res.value == pytest.approx(expected, rel=1e-10)
    assert res.abs_error_estimate >= 0
    assert res.evaluations >= 1


def test_polynomial_tail_against_scipy():
    f = lambda v: (1 + v * v) ** -2.5  # noqa: E731
    ref = si.quad(f, 0, np.inf, epsabs=0, epsrel=1e-13)[0]
    assert quad.integrate(f, 0.0, math.inf, 1e-11).value == pytest.approx(ref, rel=1e-10)


def test_endpoint_singularity():
    res = quad.integrate(lambda v: 1 / np.sqrt(v), 0.0, 1.0, 1e-8)
    assert res.value == pytest.approx(2.0, rel=1e-7)


def test_reversed_limits_and_empty_range():
    f = lambda v: v * v  # noqa: E731
    assert quad.integrate(f, 1.0, 0.0).value == pytest.approx(-1 / 3, rel=1e-12)
    assert quad.integrate(f, 2.0, 2.0).value == 0.0


def test_deterministic():
    f = lambda v: np.cos(v) * np.exp(-v)  # noqa: E731
    a = quad.integrate(f, 0.0, math.inf, 1e-9)
    b = quad.integrate(f, 0.0, math.inf, 1e-9)
    assert a == b


def test_nan_reports_abscissa():
    with pytest.raises(quad.QuadratureError) as info:
        quad.integrate(lambda v: np.where(v > 0.3, np.nan, v), 0.0, 1.0)
    assert info.value.abscissa > 0.3


def test_nonconvergence_carries_estimate():
    with pytest.raises(quad.QuadratureError) as info:
        quad.integrate(lambda v: 1 / v, 0.0, 1.0, 1e-10)
    assert math.isfinite(info.value.estimate)
    assert info.value.error > 0


@pytest.mark.parametrize("tol", [1e-15, 1e-2, 0.5])
def test_tolerance_range(tol):
    with pytest.raises(ValueError):
        quad.integrate(np.exp, 0.0, 1.0, tol)


def test_result_invariants():
    with pytest.raises(ValueError):
        quad.QuadResult(1.0, -1.0, 1)
    with pytest.raises(ValueError):
        quad.QuadResult(1.0, 0.0, 0)


coef = st.floats(-3, 3, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(st.lists(coef, min_size=1, max_size=4), st.lists(coef, min_size=1, max_size=4),
       coef, coef, st.floats(0.3, 3.0))
def test_linearity(pa, pb, a, b, beta):
    tol = 1e-10
    f = lambda v: np.polyval(pa, v) * np.exp(-beta * v * v)  # noqa: E731
    g = lambda v: np.polyval(pb, v) * np.exp(-beta * v * v)  # noqa: E731
    lhs = quad.integrate(lambda v: a * f(v) + b * g(v), 0.0, math.inf, tol).value
    rhs = a * quad.integrate(f, 0.0, math.inf, tol).value + b * quad.integrate(g, 0.0, math.inf, tol).value
    scale = sum(abs(c) for c in pa) * abs(a) + sum(abs(c) for c in pb) * abs(b) + 1e-300
    # each of the three integrals may stop at the absolute floor instead of the relative target
    floor = quad.ABS_FLOOR * (1 + abs(a) + abs(b))
    assert abs(lhs - rhs) <= 10 * tol * max(scale, abs(lhs)) + floor


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 20.0), st.floats(0.3, 3.0), st.floats(2.5, 8.0))
def test_split_consistency(T, beta, N):
    tol = 1e-10
    for f in (lambda v: v * np.exp(-beta * v * v), lambda v: (1 + v * v) ** (-0.5 * N)):
        whole = quad.integrate(f, 0.0, math.inf, tol).value
        parts = quad.integrate(f, 0.0, T, tol).value + quad.integrate(f, T, math.inf, tol).value
        assert parts == pytest.approx(whole, rel=10 * tol)


def test_fixed_rules():
    x, w = quad.halfline_rule()
    assert np.sum(w * np.exp(-x)) == pytest.approx(1.0, rel=1e-10)
    x, w = quad.graded_rule(24)
    assert np.all((x > 0) & (x < 1))
    assert np.sum(w * x ** -0.5) == pytest.approx(2.0, rel=1e-6)
    x, w = quad.gauss_panels([0.0, 1.0, 3.0])
    assert np.sum(w * x**3) == pytest.approx(81 / 4, rel=1e-13)
