"""Body dynamics under the memory force and the fixed-point iteration on motions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kernel import check_assumptions
from .memory import MemoryConfig, recollision_curve
from .motion import EnvelopeReport, MotionGrid, envelope_check, envelope_make, hybrid_grid


class AssumptionError(ValueError):
    def __init__(self, report):
        super().__init__("model fails assumptions: " + ", ".join(report.failing))
        self.report = report


@dataclass(frozen=True)
class GridConfig:
    dt: float = 0.02
    t_max: float = 400.0
    ratio: float = 1.05
    uniform_factor: float = 4.0

    def build(self, t0):
        return hybrid_grid(self.dt, self.uniform_factor * max(t0, self.dt), self.t_max, self.ratio)


def _phi_weights(z):
    """ETDRK4 weights for scalar z = -q*h, via a contour mean to avoid cancellation."""
    pts = z + np.exp(1j * np.pi * (np.arange(32) + 0.5) / 32)
    ez = np.exp(pts)
    half = np.exp(pts / 2.0)
    z3 = pts**3
    f1 = np.mean((-4.0 - pts + ez * (4.0 - 3.0 * pts + pts * pts)) / z3).real
    f2 = np.mean((2.0 + pts + ez * (pts - 2.0)) / z3).real
    f3 = np.mean((-4.0 - 3.0 * pts - pts * pts + ez * (4.0 - pts)) / z3).real
    ph = np.mean((half - 1.0) / pts).real
    return math.exp(z), math.exp(0.5 * z), f1, f2, f3, ph


def _scalar_q(model):
    """Fast scalar Q(y) for the step loop."""
    if hasattr(model, "_q_table"):
        lo, hi, coef = model._q_table
        c = [float(x) for x in coef]
        a, b = 2.0 / (hi - lo), -(hi + lo) / (hi - lo)

        def q(y):
            x = a * y + b
            x2 = 2.0 * x
            b1 = b2 = 0.0
            for ck in reversed(c[1:]):
                b1, b2 = ck + x2 * b1 - b2, b1
            return c[0] + x * b1 - b2
        return q
    return lambda y: float(model.q_of_gap(y))


def _etd_step(y, t, h, q_of, force):
    q = q_of(y)
    E, E2, f1, f2, f3, ph = _phi_weights(-q * h)
    hp = h * ph

    def N(yy, tt):
        return -(q_of(yy) - q) * yy + force(tt)

    Nu = N(y, t)
    a = E2 * y + hp * Nu
    Na = N(a, t + 0.5 * h)
    b = E2 * y + hp * Na
    Nb = N(b, t + 0.5 * h)
    c = E2 * a + hp * (2.0 * Nb - Nu)
    Nc = N(c, t + h)
    return E * y + h * (f1 * Nu + 2.0 * f2 * (Na + Nb) + f3 * Nc)


def integrate_motion(model, R, times, y0=None, rel_tol=1e-9):
    """Solve for the gap y = V_inf - V with dy/dt = -(F0(V_inf) - F0(V_inf - y)) + R(t).

    R is either an array on the grid, interpolated linearly, or a callable
    evaluated wherever the stepper needs it. Steps are exponential Runge-Kutta of order four with step doubling.
    """
    times = np.asarray(times, dtype=float)
    Rv = None
    if not callable(R):
        Rv = np.asarray(R, dtype=float)
        if Rv.shape != times.shape:
            raise ValueError("R must be given on the grid")
    gamma = model.gamma
    q_of = _scalar_q(model)
    y = gamma if y0 is None else float(y0)
    out = np.empty(times.size)
    out[0] = y
    h_try = None
    for k in range(times.size - 1):
        ta, tb = float(times[k]), float(times[k + 1])
        if Rv is None:
            force = lambda tt: float(R(tt))  # noqa: E731
        else:
            r0, slope = Rv[k], (Rv[k + 1] - Rv[k]) / (tb - ta)
            force = lambda tt, r0=r0, slope=slope, ta=ta: r0 + slope * (tt - ta)  # noqa: E731
        t = ta
        h_min = 1e-9 * (tb - ta)
        h = tb - ta if h_try is None else min(h_try, tb - ta)
        while t < tb:
            h = min(h, tb - t)
            big = _etd_step(y, t, h, q_of, force)
            mid = _etd_step(y, t, 0.5 * h, q_of, force)
            small = _etd_step(mid, t + 0.5 * h, 0.5 * h, q_of, force)
            err = abs(small - big) / 15.0
            # gaps below 1e-30*gamma carry no information; floor keeps h from collapsing
            scale = max(abs(small), abs(y), 1e-30 * gamma)
            tol = rel_tol * (min(gamma, scale) if gamma > 0 else scale) + 1e-300
            if err <= tol or h <= h_min:
                t = tb if tb - (t + h) < 1e-14 * tb else t + h
                y = max(small + (small - big) / 15.0, -1e-12)
                grow = 4.0 if err == 0 else min(4.0, 0.9 * (tol / err) ** 0.2)
                h = max(h * grow, h_min)
            else:
                h = h * max(0.1, 0.9 * (tol / err) ** 0.2)
        h_try = h
        out[k + 1] = y
    return MotionGrid(times, np.maximum(out, -1e-12), model.V_inf)


def quotient_Q(model, motion, t):
    y = float(motion.gap_at(t))
    if y < 1e-14:
        h = 1e-5 * max(1.0, model.gamma)
        return (model.f0(model.V_inf + h) - model.f0(model.V_inf - h)) / (2.0 * h)
    return float(model.relaxation(y)) / y


@dataclass
class SolveResult:
    motion: MotionGrid
    R_curve: np.ndarray
    right: np.ndarray
    left: np.ndarray
    iterations: int
    residual_history: list
    envelope: object
    envelope_report: EnvelopeReport | None
    converged: bool
    B0: float
    Binf: float
    t0: float
    extras: dict = field(default_factory=dict)


def fit_envelope(motion, gamma, p, d, B0, Binf, safety=0.01):
    """Tail amplitudes of the bracketing profiles fitted to a solved gap curve."""
    t = motion.times
    gap = motion.gap
    n = d + p
    scale = gamma ** (p + 1)
    t0 = math.log(B0 / gamma**p) / (2.0 * Binf)
    up = (gap - gamma * np.exp(-B0 * t)) * (1.0 + t) ** n / scale
    A_plus = max(float(np.max(up)) * (1.0 + safety), 1e-300)
    tail = t > 2.0 * t0
    if np.any(tail):
        low = (gap[tail] - gamma * np.exp(-Binf * t[tail])) * t[tail] ** n / scale
        A_minus = float(np.min(low)) * (1.0 - safety)
    else:
        A_minus = 0.0
    return A_plus, A_minus


def _anderson_update(xs, fs, damping):
    """Next iterate from the stored iterates and residuals (type-II Anderson mixing)."""
    x, f = xs[-1], fs[-1]
    if len(xs) == 1:
        return x + damping * f
    dF = np.diff(np.array(fs), axis=0).T
    dX = np.diff(np.array(xs), axis=0).T
    coef = np.linalg.lstsq(dF, f, rcond=None)[0]
    return x + damping * f - (dX + damping * dF) @ coef


def fixed_point_solve(model, mem_cfg=MemoryConfig(), grid_cfg=GridConfig(), tol=1e-8, max_iter=30,
                      initial=None, check=True, callback=None, mixing=0, damping=1.0):
    """Iterate W -> V_W from the recollisionless motion until the sup change is below tol*gamma.

    With mixing=0 and damping=1 this is the plain iteration. A positive mixing
    keeps that many past residuals for Anderson acceleration; together with
    damping < 1 this tames the oscillating iterates seen when the memory force
    is as large as the relaxation force (p = 0).
    """
    if mixing < 0 or not 0.0 < damping <= 1.0:
        raise ValueError("need mixing >= 0 and 0 < damping <= 1")
    gamma = model.gamma
    if gamma == 0:
        times = grid_cfg.build(1.0)
        motion = MotionGrid(times, np.zeros(times.size), model.V_inf)
        zeros = np.zeros(times.size)
        return SolveResult(motion, zeros, zeros, zeros.copy(), 1, [0.0], None, None, True,
                           math.nan, math.nan, math.nan)
    if check and hasattr(model, "kernel"):
        report = check_assumptions(model.kernel, model.a0, model.alpha, gamma, model.V0, model.V_inf)
        if not report.overall:
            raise AssumptionError(report)
    B0, Binf = model.stiffness_bounds()
    p, d = model.p, model.d
    t0 = math.log(B0 / gamma**p) / (2.0 * Binf)
    if not t0 > 0:
        raise ValueError("crossover time is not positive; gamma too large for this model")
    times = grid_cfg.build(t0)
    zero = np.zeros(times.size)
    if initial is not None:
        W = MotionGrid(times, np.interp(times, initial.times, initial.gap), model.V_inf)
    else:
        W = integrate_motion(model, zero, times)
    history = []
    converged = False
    curve = None
    xs, fs = [], []
    plain = mixing == 0 and damping == 1.0
    for it in range(1, max_iter + 1):
        curve = recollision_curve(W, model, mem_cfg)
        new = integrate_motion(model, curve.total, times)
        res = float(np.max(np.abs(new.gap - W.gap)))
        history.append(res)
        if callback is not None:
            callback(it, res, new, curve)
        if res <= tol * gamma or plain:
            W = new
            if res <= tol * gamma:
                converged = True
                break
            continue
        xs = (xs + [W.gap.copy()])[-(mixing + 1):]
        fs = (fs + [new.gap - W.gap])[-(mixing + 1):]
        nxt = np.maximum(_anderson_update(xs, fs, damping), 0.0)
        nxt[0] = gamma
        W = W.with_gap(nxt)
    A_plus, A_minus = fit_envelope(W, gamma, p, d, B0, Binf)
    env = None
    report = None
    if 0 < gamma < 1:
        env = envelope_make(gamma, p, d, B0, Binf, A_plus, max(A_minus, 1e-300))
        report = envelope_check(env, W)
    return SolveResult(W, curve.total, curve.right, curve.left, len(history), history, env, report,
                       converged, B0, Binf, t0, {"A_minus_raw": A_minus})
