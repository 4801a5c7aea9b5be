import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, optimize

from gasbody.force import ForceModel
from gasbody.kernel import InitialDensity, PerpMode, PerpProfile, make_kernel
from gasbody.memory import (MemoryConfig, incoming_density, perp_factor, recollision_curve,
                            recollision_force)
from gasbody.motion import Face, MotionGrid, hybrid_grid

TRIALS = settings(max_examples=1000, deadline=None)

KERNEL = make_kernel("GaussFlux", {"beta": 1.0})
A0 = InitialDensity.gaussian(1.0)
MODEL = ForceModel(KERNEL, A0, 0.0, 1.0, 0.95)
GAMMA = MODEL.gamma
DISC = PerpProfile(2)


def relaxing_motion(t_max=60.0):
    t = hybrid_grid(0.02, 1.2, t_max)
    gap = GAMMA * np.exp(-3 * t) + GAMMA**2 * 0.5 * (1 + t) ** -4
    gap[0] = GAMMA
    return MotionGrid(t, gap, 1.0)


MOTION = relaxing_motion()


def lens_fraction(dt, r):
    """Disc-overlap return fraction for a 2-d Gaussian perpendicular velocity, by polar quadrature."""
    def integrand(rho):
        D = rho * dt
        if D >= 2 * r:
            return 0.0
        lens = 2 * r * r * math.acos(D / (2 * r)) - 0.5 * D * math.sqrt(4 * r * r - D * D)
        return rho * math.exp(-0.5 * rho * rho) * lens / (math.pi * r * r)
    return integrate.quad(integrand, 0.0, 2 * r / dt, epsabs=0, epsrel=1e-12, limit=200)[0]


def depth_one_oracle(motion, t):
    """Right-face memory force at depth 1: brute-force root scan plus adaptive quadrature."""
    gt = float(motion.gap_at(t))
    zmax = float(motion.window_gap(0.0, t))

    def source(v, W):
        return integrate.quad(lambda x: KERNEL.k(v, x) * A0(W - x), 0, np.inf, epsabs=0, epsrel=1e-12)[0]

    def integrand(z):
        f = lambda s: float(motion.window_gap(s, t)) - z  # noqa: E731
        ss = np.linspace(0, t, 2001)[:-1]
        hits = np.nonzero(np.array([f(x) for x in ss]) >= 0)[0]
        if hits.size == 0:
            return 0.0
        j = hits[-1]
        s = optimize.brentq(f, ss[j], ss[j + 1] if j + 1 < ss.size else t * (1 - 1e-13), xtol=1e-15)
        gs = float(motion.gap_at(s))
        excess = source(gs - z, 1.0 - gs) - A0(1.0 - z)
        back = MODEL.perp.return_fraction(np.array([t - s]), 1.0)[0]
        return MODEL.face_area * MODEL.ell(z - gt) * back * excess

    return integrate.quad(integrand, gt, zmax, limit=200, epsrel=1e-8)[0]


def test_perp_factor_examples():
    for mode in PerpMode:
        assert perp_factor(DISC, np.array([1e-12]), 1.0, mode)[0] == pytest.approx(1.0, abs=1e-9)
    # 2r/dt = 1
    assert perp_factor(DISC, np.array([2.0]), 1.0, PerpMode.PAPER_BOUND)[0] == pytest.approx(0.393469, abs=1e-6)
    for dt, r in [(0.3, 1.0), (2.0, 1.0), (5.0, 0.5), (40.0, 2.0)]:
        exact = perp_factor(DISC, np.array([dt]), r, PerpMode.EXACT_DISC)[0]
        assert exact == pytest.approx(lens_fraction(dt, r), rel=1e-12, abs=1e-15)


@TRIALS
@given(st.floats(1e-3, 100.0), st.floats(0.05, 5.0), st.integers(1, 4))
def test_exact_disc_below_loose_bound(dt, r, dim):
    prof = PerpProfile(dim)
    exact = perp_factor(prof, np.array([dt]), r, PerpMode.EXACT_DISC)[0]
    bound = perp_factor(prof, np.array([dt]), r, PerpMode.PAPER_BOUND)[0]
    assert -1e-15 <= exact <= bound * (1 + 1e-12) + 1e-15
    assert bound <= 1.0


def test_config_invariants():
    with pytest.raises(ValueError):
        MemoryConfig(depth=0)
    with pytest.raises(ValueError):
        MemoryConfig(u_quad_points=8)
    assert MemoryConfig(perp_mode="PaperBound").perp_mode is PerpMode.PAPER_BOUND


def test_incoming_density_base_cases():
    u = 0.9
    cfg = MemoryConfig()
    assert incoming_density(MOTION, 2.0, Face.RIGHT, u, MODEL, cfg, 0) == A0(u)
    rest = MotionGrid(MOTION.times, np.full(MOTION.times.size, GAMMA), 1.0)
    assert incoming_density(rest, 2.0, Face.RIGHT, u, MODEL, cfg, 2) == A0(u)
    # an accelerating body never catches up with particles that left its rear face
    t0 = math.log(MODEL.stiffness_bounds()[0] / GAMMA) / (2 * MODEL.stiffness_bounds()[1])
    for t in (0.1, t0):
        W = 1.0 - float(MOTION.gap_at(t))
        assert incoming_density(MOTION, t, Face.LEFT, W + 0.01, MODEL, cfg, 2) == A0(W + 0.01)
    with pytest.raises(ValueError):
        incoming_density(MOTION, 2.0, Face.LEFT, 0.9, MODEL, cfg, 2)


def test_constant_motion_has_no_memory():
    rest = MotionGrid(MOTION.times, np.full(MOTION.times.size, GAMMA), 1.0)
    curve = recollision_curve(rest, MODEL)
    assert np.all(curve.total == 0.0)


def test_left_component_vanishes_early():
    B0, Binf = MODEL.stiffness_bounds()
    t0 = math.log(B0 / GAMMA) / (2 * Binf)
    times = np.linspace(0.05, t0, 7)
    curve = recollision_curve(MOTION, MODEL, times=times)
    assert np.all(curve.left == 0.0)
    assert np.all(curve.right > 0)


def test_inconsistent_motion_rejected():
    with pytest.raises(ValueError):
        recollision_curve(MotionGrid(MOTION.times, MOTION.gap, 1.1), MODEL)
    with pytest.raises(ValueError):
        recollision_force(MOTION, 0.0, MODEL)


# frozen from depth_one_oracle on relaxing_motion()
FROZEN_DEPTH_ONE = {0.5: 3.998450521231674e-04, 2.0: 2.408607279077221e-05}


@pytest.mark.parametrize("t", sorted(FROZEN_DEPTH_ONE))
def test_depth_one_frozen(t):
    got = recollision_force(MOTION, t, MODEL, MemoryConfig(depth=1))
    assert got == pytest.approx(FROZEN_DEPTH_ONE[t], rel=1e-5)


def test_depth_one_against_oracle():
    t = 8.0
    got = recollision_force(MOTION, t, MODEL, MemoryConfig(depth=1))
    assert got == pytest.approx(depth_one_oracle(MOTION, t), rel=1e-5)


def test_depth_convergence_geometric():
    mot = relaxing_motion(20.0)
    t = np.array([1.0])
    values = [recollision_curve(mot, MODEL, MemoryConfig(depth=n), times=t).total[0] for n in (1, 2, 3, 4)]
    steps = np.abs(np.diff(values))
    assert np.all(steps > 0)
    ratios = steps[1:] / steps[:-1]
    # geometric with ratio at most a modest multiple of gamma^(p+1)
    assert np.all(ratios <= GAMMA ** (MODEL.p + 1))


def test_loose_bound_gives_more_memory():
    t = np.array([0.5, 3.0])
    exact = recollision_curve(MOTION, MODEL, MemoryConfig(perp_mode="ExactDisc"), times=t).total
    loose = recollision_curve(MOTION, MODEL, MemoryConfig(perp_mode="PaperBound"), times=t).total
    assert np.all(loose >= exact) and np.all(exact > 0)
