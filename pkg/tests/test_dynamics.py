import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from gasbody.analysis import verify_solution
from gasbody.dynamics import (AssumptionError, GridConfig, fixed_point_solve, integrate_motion, quotient_Q)
from gasbody.force import ForceModel, LinearForceModel
from gasbody.kernel import InitialDensity, make_kernel
from gasbody.memory import MemoryConfig, recollision_curve
from gasbody.motion import MotionGrid, hybrid_grid

TRIALS = settings(max_examples=1000, deadline=None)

GAUSS = ForceModel(make_kernel("GaussFlux", {"beta": 1.0}), InitialDensity.gaussian(1.0), 0.0, 1.0, 0.95)
LINEAR = LinearForceModel(2.0, 1.0, 0.95)


def duhamel(model, R, t, kinks=()):
    """gamma*exp(-B t) + integral of exp(-B (t - s)) R(s) over [0, t], by adaptive quadrature."""
    B = model.slope
    pts = [k for k in kinks if 0 < k < t] or None
    limit = 400 + (len(pts) if pts else 0)
    tail = integrate.quad(lambda s: math.exp(-B * (t - s)) * R(s), 0, t, points=pts, limit=limit,
                          epsabs=1e-16, epsrel=1e-12)[0]
    return model.gamma * math.exp(-B * t) + tail


def test_linear_relaxation():
    t = hybrid_grid(0.02, 1.0, 400.0)
    W = integrate_motion(LINEAR, np.zeros(t.size), t)
    np.testing.assert_allclose(W.gap, 0.05 * np.exp(-2 * t), rtol=0, atol=1e-8)


def test_rest_is_stationary():
    t = hybrid_grid(0.02, 1.0, 400.0)
    W = integrate_motion(LinearForceModel(2.0, 1.0, 1.0), np.zeros(t.size), t)
    assert np.all(W.gap == 0.0)


def test_power_forcing_against_duhamel():
    t = hybrid_grid(0.02, 1.0, 400.0)
    R = lambda s: 0.05**2 / (1 + s) ** 4  # noqa: E731
    W = integrate_motion(LINEAR, R, t)
    ref = np.array([duhamel(LINEAR, R, x) for x in t[::10]])
    np.testing.assert_allclose(W.gap[::10], ref, rtol=0, atol=1e-7)
    # the grid form interpolates R linearly between nodes, so its reference does too
    Wg = integrate_motion(LINEAR, R(t), t)
    Rlin = lambda s: np.interp(s, t, R(t))  # noqa: E731
    ref_lin = np.array([duhamel(LINEAR, Rlin, x, t) for x in t[::10]])
    np.testing.assert_allclose(Wg.gap[::10], ref_lin, rtol=0, atol=1e-7)


@TRIALS
@given(st.floats(0.5, 5.0), st.floats(0.0, 0.5))
def test_linear_relaxation_random(B, gamma):
    model = LinearForceModel(B, 1.0, 1.0 - gamma)
    t = np.linspace(0.0, 5.0, 26)
    W = integrate_motion(model, np.zeros(t.size), t)
    np.testing.assert_allclose(W.gap, gamma * np.exp(-B * t), rtol=0, atol=1e-8)


def test_quotient():
    t = hybrid_grid(0.02, 1.0, 50.0)
    W = integrate_motion(GAUSS, np.zeros(t.size), t)
    assert quotient_Q(GAUSS, W, 0.0) == pytest.approx((GAUSS.f0(1.0) - GAUSS.f0(0.95)) / 0.05, rel=1e-9)
    assert quotient_Q(LINEAR, integrate_motion(LINEAR, np.zeros(t.size), t), 3.0) == pytest.approx(2.0)
    B0, Binf = GAUSS.stiffness_bounds()
    Q = np.array([quotient_Q(GAUSS, W, x) for x in t])
    assert np.all(Q >= B0 * (1 - 1e-9)) and np.all(Q <= Binf * (1 + 1e-9))
    # past the resolution of the gap the derivative at V_inf is used
    assert quotient_Q(GAUSS, W, 50.0) == pytest.approx(GAUSS.f0_prime(1.0), rel=1e-6)


def test_zero_gamma_converges_at_once():
    rest = ForceModel(GAUSS.kernel, GAUSS.a0, 0.0, 1.0, 1.0)
    res = fixed_point_solve(rest, grid_cfg=GridConfig(0.02, 50.0))
    assert res.converged and res.iterations == 1
    assert np.all(res.motion.gap == 0.0)


def test_refuses_failing_model():
    bad = ForceModel(make_kernel("GaussFlux", {"beta": 10.0}), InitialDensity.gaussian(10.0), 0.0, 0.1, -0.1)
    with pytest.raises(AssumptionError):
        fixed_point_solve(bad, grid_cfg=GridConfig(0.02, 20.0))


def test_mixing_arguments():
    with pytest.raises(ValueError):
        fixed_point_solve(LINEAR, mixing=-1)
    with pytest.raises(ValueError):
        fixed_point_solve(LINEAR, damping=0.0)


def test_example_one_converges(example_one):
    res = example_one
    assert res.converged
    hist = np.array(res.residual_history)
    assert np.all(hist[:-1] > 0) and hist[-1] <= 1e-8 * 0.05
    assert np.all(np.diff(hist[1:]) < 0)


def test_example_one_brackets(example_one):
    res = example_one
    t, gap = res.motion.times, res.motion.gap
    assert np.all(gap >= 0.05 * np.exp(-res.Binf * t) * (1 - 1e-9))
    early = t <= res.t0
    assert np.all(np.diff(gap[early]) < 0)
    assert res.envelope_report.ok
    assert verify_solution(res).passed


def test_example_one_memory_force(example_one):
    res = example_one
    t, R = res.motion.times, res.R_curve
    assert np.all(R >= -1e-12)
    tail = (t >= 20.0) & (t <= 320.0)
    scaled = R[tail] * t[tail] ** 4
    assert scaled.min() > 0 and scaled.max() / scaled.min() < 10
    slope = np.polyfit(np.log(t[tail]), np.log(R[tail]), 1)[0]
    assert slope <= -4 + 0.2


def test_example_one_fixed_point(example_one):
    res = example_one
    again = integrate_motion(GAUSS, recollision_curve(res.motion, GAUSS, MemoryConfig(depth=2)).total,
                             res.motion.times)
    assert np.max(np.abs(again.gap - res.motion.gap)) <= 2 * 1e-8 * 0.05


def test_anderson_matches_plain():
    short = GridConfig(0.02, 60.0, 1.05)
    plain = fixed_point_solve(GAUSS, grid_cfg=short)
    mixed = fixed_point_solve(GAUSS, grid_cfg=short, mixing=3, damping=0.7)
    assert plain.converged and mixed.converged
    np.testing.assert_allclose(mixed.motion.gap, plain.motion.gap, rtol=0, atol=5e-9 * 0.05)


def test_nonconvergence_is_reported():
    res = fixed_point_solve(GAUSS, grid_cfg=GridConfig(0.02, 30.0), max_iter=1)
    assert not res.converged
    assert len(res.residual_history) == 1
    assert isinstance(res.motion, MotionGrid)
