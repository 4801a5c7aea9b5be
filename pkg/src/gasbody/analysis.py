"""Tail-exponent fits and pointwise verification of the decay bounds."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

from .dynamics import fit_envelope
from .motion import Envelope

SLACK = 1e-9


@dataclass(frozen=True)
class RateFit:
    exponent: float
    amplitude: float
    window: tuple
    rms_residual: float
    stderr_exponent: float
    n_samples: int


def default_window(t_max, t0):
    return (max(10.0, 10.0 * t0), 0.8 * t_max)


def fit_tail_exponent(times, gap, window):
    """Least squares of log(gap) against log(1 + t) inside the window; decay rate reported positive."""
    times = np.asarray(times, dtype=float)
    gap = np.asarray(gap, dtype=float)
    lo, hi = window
    if not lo < hi:
        raise ValueError("window must satisfy t_lo < t_hi")
    sel = (times >= lo) & (times <= hi)
    if np.count_nonzero(sel) < 10:
        raise ValueError("need at least 10 samples in the fit window")
    g = gap[sel]
    if np.any(g <= 0):
        raise ValueError("gap must be positive inside the fit window")
    x = np.log1p(times[sel])
    y = np.log(g)
    fit = stats.linregress(x, y)
    resid = y - (fit.intercept + fit.slope * x)
    return RateFit(-float(fit.slope), float(math.exp(fit.intercept)), (float(lo), float(hi)),
                   float(np.sqrt(np.mean(resid**2))), float(fit.stderr), int(sel.sum()))


def crossover_time(gamma, rate, power, coef=None, bracket=(None, 1e4)):
    """Later time where gamma*exp(-rate t) equals coef*t**-power (coef defaults to gamma**2)."""
    coef = gamma**2 if coef is None else coef
    f = lambda t: math.log(gamma) - rate * t - math.log(coef) + power * math.log(t)  # noqa: E731
    lo = bracket[0] if bracket[0] is not None else power / rate
    if f(lo) < 0:
        raise ValueError("exponential never drops below the power law")
    return optimize.brentq(f, lo, bracket[1], xtol=1e-12)


@dataclass(frozen=True)
class Condition:
    name: str
    passed: bool
    margin: float
    t_worst: float
    advisory: bool = False
    note: str = ""


@dataclass(frozen=True)
class VerificationReport:
    conditions: tuple
    A_plus: float
    A_minus: float
    kappa: float
    envelope: Envelope | None

    @property
    def passed(self):
        return all(c.passed for c in self.conditions if not c.advisory)

    def condition(self, name):
        for c in self.conditions:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_text(self):
        lines = []
        for c in self.conditions:
            tag = "pass" if c.passed else ("ADVISORY" if c.advisory else "FAIL")
            extra = f"  ({c.note})" if c.note else ""
            lines.append(f"{c.name:<16} {tag:<8} margin={c.margin:.6g} t_worst={c.t_worst:.6g}{extra}")
        lines.append(f"A_plus={self.A_plus:.6g} A_minus={self.A_minus:.6g} kappa={self.kappa:.6g}")
        lines.append("overall " + ("pass" if self.passed else "FAIL"))
        return "\n".join(lines)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["condition", "pass", "margin", "t_worst"])
        for c in self.conditions:
            w.writerow([c.name, "pass" if c.passed else "fail", f"{c.margin:.17g}", f"{c.t_worst:.17g}"])
        return buf.getvalue()


def _worst(margin, t, mask=None):
    if mask is not None:
        if not np.any(mask):
            return math.inf, math.nan
        margin, t = margin[mask], t[mask]
    i = int(np.argmin(margin))
    return float(margin[i]), float(t[i])


def verify_curve(motion, gamma, p, d, B0, Binf, peak_before=None, amplitudes=None):
    """Check the bracketing inequalities on a gap curve and fit the tail constants.

    peak_before is the time after which the scaled excess must no longer peak
    (default 0.8 * T_max). amplitudes = (A_plus, A_minus) checks against given
    tail constants instead of fitting them to this curve.
    """
    t = motion.times
    gap = motion.gap
    n = d + p
    t0 = math.log(B0 / gamma**p) / (2.0 * Binf)
    if amplitudes is None:
        A_plus, A_minus = fit_envelope(motion, gamma, p, d, B0, Binf)
    else:
        A_plus, A_minus = amplitudes
    env = Envelope(gamma, p, d, B0, Binf, A_plus, max(A_minus, 1e-300))
    conds = []

    g = gamma * env.g(t)
    m, tw = _worst((g - gap) / g, t)
    conds.append(Condition("upper", m > 0, m, tw))

    tail = t > 2.0 * t0
    if A_minus > 0:
        h = gamma * env.h(t)
        m, tw = _worst((gap - h) / h, t)
        conds.append(Condition("lower", m >= -SLACK, m, tw))
    else:
        low = (gap - gamma * np.exp(-Binf * t)) * t**n / gamma ** (p + 1)
        m, tw = _worst(low, t, tail)
        conds.append(Condition("lower", False, m, tw, note="no positive tail amplitude fits"))

    M = env.M
    Gb = env.G * (1.0 + t) ** (-M) - env.g(t)
    m, tw = _worst(Gb / (env.G * (1.0 + t) ** (-M)), t)
    ok = M > (p + d) / (p + 1.0) and m >= -SLACK
    # a premise of the envelope construction; p = 0 sits exactly on its boundary
    conds.append(Condition("decay_bound", ok, m, tw, advisory=True, note=f"M={M:.6g}"))

    H, G, q = env.H, env.G, env.q
    need = max((2.0 * G / H) ** (1.0 / (M - 1.0)) if M > 1 else math.inf,
               4.0**q * (2.0**M * G / H) ** (q * (p + 1.0)) if 0 < q < math.inf else math.inf)
    conds.append(Condition("t0_bound", 2.0 * t0 >= need, 2.0 * t0 - need, 2.0 * t0, advisory=True,
                           note="sufficient condition only; needs 2*t0 >= %.6g" % need))

    expo = gamma * np.exp(-Binf * t)
    m, tw = _worst((gap - expo) / np.maximum(np.maximum(gap, expo), 1e-300), t)
    conds.append(Condition("exp_lower", m >= -SLACK, m, tw))

    # kappa is the sup of the scaled excess; a sup reached at the end of the grid means no bound
    scaled = (gap - gamma * np.exp(-B0 * t)) * (1.0 + t) ** n
    i = int(np.argmax(scaled))
    kappa = float(scaled[i]) * (1.0 + SLACK)
    t_end = peak_before if peak_before is not None else 0.8 * t[-1]
    bound = gamma * np.exp(-B0 * t) + kappa * (1.0 + t) ** (-n)
    m, _ = _worst((bound - gap) / np.maximum(bound, 1e-300), t)
    ok = kappa > 0 and m >= -SLACK and t[i] < t_end
    conds.append(Condition("power_upper", ok, m, float(t[i]), note=f"kappa={kappa:.6g}"))

    c_low = (gap - expo) * np.maximum(t, 1e-300) ** n
    m, tw = _worst(c_low, t, tail)
    conds.append(Condition("power_lower", m > 0, m, tw))
    return VerificationReport(tuple(conds), A_plus, A_minus, kappa, env)


def verify_solution(result, model=None):
    """Verify a solve against the tail constants fitted when it converged (refitted if it has none)."""
    env = result.envelope
    gamma = result.motion.gap[0]
    p = env.p if env is not None else model.p
    d = env.d if env is not None else model.d
    amps = None
    if env is not None:
        amps = (env.A_plus, result.extras.get("A_minus_raw", env.A_minus))
    return verify_curve(result.motion, gamma, p, d, result.B0, result.Binf, amplitudes=amps)


@dataclass(frozen=True)
class Comparison:
    times: np.ndarray
    reference: np.ndarray
    estimate: np.ndarray
    sigma: np.ndarray
    allowed: np.ndarray

    @property
    def ok(self):
        return bool(np.all(np.abs(self.estimate - self.reference) <= self.allowed))

    @property
    def worst_ratio(self):
        return float(np.max(np.abs(self.estimate - self.reference) / self.allowed))


def compare_to_reference(ref_times, ref_values, times, estimate, sigma, rel=0.05, n_sigma=3.0):
    """Compare a noisy estimate against a reference curve within max(n_sigma*sigma, rel*|ref|)."""
    times = np.asarray(times, dtype=float)
    ref = np.exp(np.interp(np.log(times), np.log(ref_times[1:]), np.log(np.maximum(ref_values[1:], 1e-300))))
    allowed = np.maximum(n_sigma * np.asarray(sigma), rel * np.abs(ref))
    return Comparison(times, ref, np.asarray(estimate, dtype=float), np.asarray(sigma, dtype=float), allowed)
