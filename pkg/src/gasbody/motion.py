"""Velocity histories on a time grid, window averages, return-time search and envelopes."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

BISECTION_STEPS = 56
EPS = np.finfo(float).eps


class Face(str, enum.Enum):
    RIGHT = "Right"
    LEFT = "Left"


def hybrid_grid(dt, t_uniform, t_max, ratio=1.05):
    """Uniform steps of size dt up to t_uniform, then geometric growth by ratio up to t_max."""
    if not (dt > 0 and ratio > 1 and t_max > 0):
        raise ValueError("invalid grid parameters")
    t_uniform = min(max(t_uniform, dt), t_max)
    n = max(1, int(math.ceil(t_uniform / dt - 1e-9)))
    pts = list(np.linspace(0.0, n * dt, n + 1))
    h = dt
    while pts[-1] < t_max:
        h *= ratio
        pts.append(min(pts[-1] + h, t_max) if t_max - pts[-1] - h > 0.2 * h else t_max)
    return np.asarray(pts)


@dataclass(frozen=True, eq=False)
class PrecollisionHit:
    s: float
    face: Face


@dataclass(frozen=True, eq=False)
class MotionGrid:
    """Piecewise-linear W(t), stored as ref - gap so that tiny gaps keep full precision."""

    times: np.ndarray
    gap: np.ndarray
    ref: float
    gap_prefix: np.ndarray = field(init=False, repr=False)
    slopes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        g = np.asarray(self.gap, dtype=float)
        if t.ndim != 1 or t.shape != g.shape or t.size < 2:
            raise ValueError("times and gap must be 1-D arrays of equal length >= 2")
        if t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ValueError("times must start at 0 and increase strictly")
        if not np.all(np.isfinite(g)):
            raise ValueError("motion values must be finite")
        if np.any(g < -1e-12):
            raise ValueError("motion exceeds its reference velocity")
        h = np.diff(t)
        prefix = np.concatenate([[0.0], np.cumsum(0.5 * (g[1:] + g[:-1]) * h)])
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "gap", g)
        object.__setattr__(self, "ref", float(self.ref))
        object.__setattr__(self, "gap_prefix", prefix)
        object.__setattr__(self, "slopes", np.diff(g) / h)

    @classmethod
    def from_values(cls, times, values, ref=None):
        values = np.asarray(values, dtype=float)
        ref = float(np.max(values)) if ref is None else float(ref)
        return cls(np.asarray(times, dtype=float), ref - values, ref)

    @property
    def values(self):
        return self.ref - self.gap

    @property
    def prefix(self):
        """Running integral of W at the grid nodes."""
        return self.ref * self.times - self.gap_prefix

    @property
    def t_max(self):
        return float(self.times[-1])

    def _cell(self, s):
        idx = np.searchsorted(self.times, s, side="right") - 1
        return np.clip(idx, 0, self.times.size - 2)

    def gap_at(self, s):
        s = np.asarray(s, dtype=float)
        c = self._cell(s)
        return self.gap[c] + self.slopes[c] * (s - self.times[c])

    def value_at(self, s):
        return self.ref - self.gap_at(s)

    def _prefix_in_cell(self, s, c):
        x = s - self.times[c]
        return self.gap_prefix[c] + x * (self.gap[c] + 0.5 * self.slopes[c] * x)

    def gap_prefix_at(self, s):
        s = np.asarray(s, dtype=float)
        return self._prefix_in_cell(s, self._cell(s))

    def window_gap(self, s, t):
        """Mean of the gap over [s, t] (exact for piecewise-linear data)."""
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        if np.any(s >= t):
            raise ValueError("window needs s < t")
        cs, ct = self._cell(s), self._cell(t)
        # whole cells between, plus the partial cells at each end, so narrow windows keep full precision
        nxt = np.minimum(cs + 1, self.times.size - 1)
        head = 0.5 * (self.times[nxt] - s) * (self.gap_at(s) + self.gap[nxt])
        inner = self.gap_prefix[ct] - self.gap_prefix[nxt]
        tail = self._prefix_in_cell(t, ct) - self.gap_prefix[ct]
        spread = np.where(cs == ct, 0.0, (head + inner + tail) / np.where(cs == ct, 1.0, t - s))
        return np.where(cs == ct, self.gap_at(0.5 * (s + t)), spread)

    def window_average(self, s, t):
        return self.ref - self.window_gap(s, t)

    def with_gap(self, gap):
        return MotionGrid(self.times, gap, self.ref)

    # -- return-time machinery, vectorised over rows of observation times --

    def window_table(self, t_rows):
        """Window means of the gap over [S_j, t] for every row t.

        The S_j interleave the nodes (clipped to t) with the point inside each
        cell where the mean is stationary, so every local extremum of the mean
        as a function of s is a column; cells without one repeat their left node.
        Returns (S, means, gap_t, prefix_t); the last column has S = t and holds gap(t).
        """
        t_rows = np.asarray(t_rows, dtype=float)
        T = self.times
        Pt = self.gap_prefix_at(t_rows)
        gt = self.gap_at(t_rows)
        tc = t_rows[:, None]
        nodes = np.minimum(T[None, :], tc)
        # stationary point: gap(s) equals the window mean, a quadratic in y = s - T_j
        D = tc - T[None, :-1]
        c = self.slopes[None, :]
        K = Pt[:, None] - self.gap_prefix[None, :-1] - self.gap[None, :-1] * D
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            disc = D * D - 2.0 * K / np.where(c != 0, c, 1.0)
            y = D - np.sqrt(np.maximum(disc, 0.0))
        # the cell holding t is linear up to t, so only cells ending before t can have one
        h = np.diff(T)[None, :]
        inside = (c != 0) & (disc >= 0) & (D > h) & (y > 0) & (y < h)
        extra = np.where(inside, T[None, :-1] + np.where(inside, y, 0.0), nodes[:, :-1])
        S = np.empty((t_rows.size, 2 * T.size))
        S[:, 0:-2:2] = nodes[:, :-1]
        S[:, 1:-2:2] = extra
        S[:, -2] = nodes[:, -1]
        S[:, -1] = t_rows
        width = tc - S
        PS = self.gap_prefix_at(S)
        with np.errstate(invalid="ignore", divide="ignore"):
            means = np.where(width > 0, (Pt[:, None] - PS) / np.where(width > 0, width, 1.0), gt[:, None])
        return S, means, gt, Pt

    def latest_roots(self, t_rows, z, table=None):
        """Largest s < t with window_gap(s, t) = z, for z of shape (rows, n).

        Returns (s, sign) with s = NaN where no root exists; sign is +1 where
        z > gap(t) (struck by the front face) and -1 otherwise.
        """
        t_rows = np.asarray(t_rows, dtype=float)
        z = np.asarray(z, dtype=float)
        S, means, gt, Pt = self.window_table(t_rows) if table is None else table
        m, ncol = means.shape
        sign = np.where(z > gt[:, None], 1.0, -1.0)
        degenerate = z == gt[:, None]
        out = np.full(z.shape, np.nan)
        for sg in (1.0, -1.0):
            sel = (sign == sg) & ~degenerate
            if not np.any(sel):
                continue
            rows, cols = np.nonzero(sel)
            target = sg * z[rows, cols]
            vals = sg * means
            suffix = np.maximum.accumulate(vals[:, ::-1], axis=1)[:, ::-1]
            # count of suffix entries >= target; suffix is nonincreasing along the row
            lo = np.zeros(rows.size, dtype=np.int64)
            hi = np.full(rows.size, ncol, dtype=np.int64)
            while np.any(lo < hi):
                mid = (lo + hi) // 2
                # a few ulps of slack so a root sitting exactly on an extremum is not lost to rounding
                ok = suffix[rows, np.minimum(mid, ncol - 1)] >= target - 8 * EPS * (np.abs(target) + self.ref)
                move = ok & (lo < hi)
                lo = np.where(move, mid + 1, lo)
                hi = np.where(~ok & (lo < hi), mid, hi)
            count = lo
            found = count > 0
            rows, cols, target, count = rows[found], cols[found], target[found], count[found]
            a = S[rows, count - 1]
            b = S[rows, np.minimum(count, ncol - 1)]
            cell = np.clip((count - 1) // 2, 0, self.times.size - 2)
            tr = t_rows[rows]
            ptr = Pt[rows]
            for _ in range(BISECTION_STEPS):
                mid = 0.5 * (a + b)
                width = tr - mid
                f = sg * (ptr - self._prefix_in_cell(mid, cell)) / np.where(width > 0, width, 1.0)
                f = np.where(width > 0, f, sg * gt[rows])
                right = f >= target
                a = np.where(right, mid, a)
                b = np.where(right, b, mid)
            out[rows, cols] = 0.5 * (a + b)
        return out, sign

    def first_precollision(self, t, u_x):
        """Latest earlier time s at which a particle with axial velocity u_x left the body."""
        t = float(t)
        if not 0.0 < t <= self.t_max:
            raise ValueError("t outside the grid")
        z = self.ref - float(u_x)
        gt = float(self.gap_at(t))
        if z == gt:
            return PrecollisionHit(t, Face.RIGHT)
        s, sign = self.latest_roots(np.array([t]), np.array([[z]]))
        if not np.isfinite(s[0, 0]):
            return None
        return PrecollisionHit(float(s[0, 0]), Face.RIGHT if sign[0, 0] > 0 else Face.LEFT)


def window_average(motion, s, t):
    return float(motion.window_average(s, t))


def first_precollision(motion, t, u_x):
    return motion.first_precollision(t, u_x)


@dataclass(frozen=True)
class Envelope:
    """Bracketing profiles: exponential transient plus a power-law tail of order d + p."""

    gamma: float
    p: float
    d: int
    B0: float
    Binf: float
    A_plus: float
    A_minus: float

    @property
    def n(self):
        return self.d + self.p

    @property
    def t0(self):
        return math.log(self.B0 / self.gamma**self.p) / (2.0 * self.Binf)

    @property
    def G(self):
        return 1.0 + self.gamma**self.p * self.A_plus

    @property
    def H(self):
        return -math.expm1(-self.Binf) / self.Binf

    @property
    def M(self):
        # B0 >= M keeps exp(-B0 t) <= (1+t)^-M, which the bound with G = 1 + gamma^p A_plus needs
        return min(self.n, self.B0)

    @property
    def q(self):
        # p = 0 gives M(p+1) = n and no finite exponent
        den = self.M * (self.p + 1.0) - self.n
        return 1.0 / den if den > 0 else math.inf

    def g(self, t):
        t = np.asarray(t, dtype=float)
        return np.exp(-self.B0 * t) + self.gamma**self.p * self.A_plus * (1.0 + t) ** (-self.n)

    def h(self, t):
        t = np.asarray(t, dtype=float)
        tail = np.where(t > 2.0 * self.t0, self.gamma**self.p * self.A_minus
                        * np.maximum(t, 2.0 * self.t0) ** (-self.n), 0.0)
        return np.exp(-self.Binf * t) + tail

    def mean_g(self, t):
        """(1/t) * integral of g over [0, t]."""
        t = np.asarray(t, dtype=float)
        n = self.n
        integral = -np.expm1(-self.B0 * t) / self.B0 + self.gamma**self.p * self.A_plus * (
            1.0 - (1.0 + t) ** (1.0 - n)) / (n - 1.0)
        return np.where(t > 0, integral / np.where(t > 0, t, 1.0), 1.0 + self.gamma**self.p * self.A_plus)

    def mean_h(self, t):
        t = np.asarray(t, dtype=float)
        n = self.n
        a = 2.0 * self.t0
        tt = np.maximum(t, a)
        tail = self.gamma**self.p * self.A_minus * (a ** (1.0 - n) - tt ** (1.0 - n)) / (n - 1.0)
        integral = -np.expm1(-self.Binf * t) / self.Binf + tail
        return np.where(t > 0, integral / np.where(t > 0, t, 1.0), 1.0)


def envelope_make(gamma, p, d, B0, Binf, A_plus, A_minus):
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    if not 0.0 <= p <= 2.0:
        raise ValueError("p must lie in [0, 2]")
    if d < 2:
        raise ValueError("d must be at least 2")
    if not 0.0 < B0 <= Binf:
        raise ValueError("need 0 < B0 <= Binf")
    if not (A_plus > 0 and A_minus > 0):
        raise ValueError("tail amplitudes must be positive")
    env = Envelope(gamma, p, d, B0, Binf, A_plus, A_minus)
    if not env.t0 > 0:
        raise ValueError("crossover time is not positive; B0 must exceed gamma**p")
    # h only has a tail after 2 t0, and its worst point against g is just after it switches on
    a = 2.0 * env.t0
    t = a * (1.0 + np.logspace(-12, 8, 2001))
    if np.any(env.g(t) < env.h(t)) or A_minus > A_plus:
        raise ValueError("tail amplitudes give h > g somewhere")
    return env


@dataclass(frozen=True)
class Violation:
    t: float
    which: str
    margin: float


@dataclass(frozen=True)
class EnvelopeReport:
    violations: list

    @property
    def ok(self):
        return not self.violations


def envelope_check(env, motion, max_reports=50):
    """Check gamma*h <= gap < gamma*g on the grid and the premise mean(h) > g after t0."""
    t = motion.times
    gap = motion.gap
    out = []
    lower = gap - env.gamma * env.h(t)
    upper = env.gamma * env.g(t) - gap
    premise = env.mean_h(t) - env.g(t)
    for name, margin, mask in (
        ("lower", lower, np.ones_like(t, dtype=bool)),
        ("upper", upper, upper <= 0),
        ("premise", premise, t >= env.t0),
    ):
        bad = np.flatnonzero(mask & ((margin < 0) if name != "upper" else (margin <= 0)))
        for i in bad[:max_reports]:
            out.append(Violation(float(t[i]), name, float(margin[i])))
    return EnvelopeReport(out)


def class_properties(env, motion):
    """Worst margins of the structural inequalities for members of the envelope class.

    Keys: above_mean (W - <W>_t > 0), mean_nondecreasing, window_exceeds_mean
    (<W>_{s,t} - <W>_t at grid s), excess_lower, excess_upper. Positive means satisfied.
    """
    t = motion.times[1:]
    W = motion.values[1:]
    mean = motion.window_average(np.zeros_like(t), t)
    excess = W - mean
    res = {"above_mean": float(np.min(excess)),
           "mean_nondecreasing": float(np.min(np.diff(mean))) if t.size > 1 else 0.0}
    worst = math.inf
    for j in range(0, t.size, max(1, t.size // 40)):
        s = motion.times[1:j + 1]
        if s.size:
            worst = min(worst, float(np.min(motion.window_average(s, np.full_like(s, t[j])) - mean[j])))
    res["window_exceeds_mean"] = worst
    g = env.gamma
    lo = g * (env.mean_h(t) - env.g(t)) * (t >= env.t0)
    res["excess_lower"] = float(np.min(excess - lo))
    res["excess_upper"] = float(np.min(g * env.mean_g(t) - excess))
    return res
