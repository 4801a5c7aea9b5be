"""Drag on a cylinder moving through undisturbed gas, and its equilibrium velocity."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.polynomial import chebyshev as C
from scipy import optimize, special

from . import quad
from .kernel import InitialDensity, PerpProfile, ball_volume, ell


class LateralVariant(str, enum.Enum):
    ZERO = "ZeroLateral"
    MONOTONE = "MonotoneLateral"


def lateral_area(d, r, length):
    n = d - 1
    return 2.0 * math.pi ** (0.5 * n) / special.gamma(0.5 * n) * r ** (n - 1) * length


@dataclass(frozen=True, eq=False)
class ForceModel:
    kernel: object
    a0: InitialDensity
    alpha: float
    V_inf: float
    V0: float
    d: int = 3
    r: float = 1.0
    cyl_length: float = 1.0
    lateral_variant: LateralVariant = LateralVariant.ZERO
    perp: PerpProfile | None = None
    alpha_lateral: float = 0.0
    rel_tol: float = 1e-11

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if not 0.0 <= self.alpha_lateral <= 1.0:
            raise ValueError("lateral accommodation must lie in [0, 1]")
        if self.d < 2:
            raise ValueError("dimension must be at least 2")
        if not (self.r > 0 and self.cyl_length > 0):
            raise ValueError("radius and length must be positive")
        if not self.V_inf >= self.V0:
            raise ValueError("need V_inf >= V0")
        object.__setattr__(self, "lateral_variant", LateralVariant(self.lateral_variant))
        if self.perp is None:
            object.__setattr__(self, "perp", PerpProfile(self.d - 1))
        elif self.perp.dim_perp != self.d - 1:
            raise ValueError("perpendicular profile dimension must be d - 1")

    @property
    def gamma(self):
        return self.V_inf - self.V0

    @property
    def p(self):
        return self.kernel.p_exponent

    @property
    def face_area(self):
        return ball_volume(self.d - 1, self.r)

    @property
    def lateral_area(self):
        return lateral_area(self.d, self.r, self.cyl_length)

    def with_velocities(self, V_inf, V0):
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(V_inf=V_inf, V0=V0)
        return ForceModel(**fields)

    def ell(self, w):
        return ell(self.kernel, self.alpha, w)

    @cached_property
    def ell_decreasing(self):
        """Whether ell strictly decreases on the negative axis (sampled)."""
        w = -np.logspace(-6, 2, 400)
        vals = self.ell(w)
        return bool(np.all(np.diff(vals) > 0))

    @property
    def lateral_rate(self):
        """Slope of the lateral drag for the monotone variant."""
        if self.lateral_variant is LateralVariant.ZERO:
            return 0.0
        hits = self.a0.mass * self.perp.sigma / math.sqrt(2.0 * math.pi)
        return (1.0 - self.alpha_lateral) * self.lateral_area * hits

    def _face_integral(self, difference, rel_tol):
        def f(w):
            return self.ell(w) * difference(w)
        return self.face_area * quad.integrate(f, 0.0, math.inf, rel_tol).value

    def face_force(self, V, rel_tol=None):
        V = float(V)
        if V == 0.0:
            return 0.0
        return self._face_integral(lambda w: self.a0.odd_difference(V, w), rel_tol or self.rel_tol)

    def face_force_prime(self, V, rel_tol=None):
        V = float(V)
        da = self.a0.derivative
        return self._face_integral(lambda w: da(V - w) - da(V + w), rel_tol or self.rel_tol)

    def lateral_force(self, V):
        return self.lateral_rate * float(V)

    def f0(self, V, rel_tol=None):
        return self.face_force(V, rel_tol) + self.lateral_force(V)

    def f0_prime(self, V, rel_tol=None):
        return self.face_force_prime(V, rel_tol) + self.lateral_rate

    @cached_property
    def E(self):
        return self.f0(self.V_inf, 1e-13)

    @cached_property
    def _q_table(self):
        """Chebyshev series in y for the secant slope Q(y) = (F0(V_inf) - F0(V_inf - y))/y."""
        y_hi = 2.0 * max(self.gamma, 1e-3)
        y_lo = -0.05 * y_hi
        deg = 32
        while True:
            nodes = np.cos(np.pi * (np.arange(deg + 1) + 0.5) / (deg + 1))
            ys = y_lo + (y_hi - y_lo) * 0.5 * (nodes + 1.0)
            s, w = np.polynomial.legendre.leggauss(24)
            s = 0.5 * (s + 1.0)
            w = 0.5 * w
            # F0' is smooth on the short interval, so a fixed rule suffices per node
            vals = []
            for y in ys:
                pts = self.V_inf - y * s
                vals.append(sum(wi * self.f0_prime(v) for wi, v in zip(w, pts)))
            coef = C.chebfit(nodes, np.array(vals), deg)
            tail = np.max(np.abs(coef[-4:]))
            if tail <= 1e-13 * np.max(np.abs(coef)) or deg >= 128:
                break
            deg *= 2
        return y_lo, y_hi, coef

    def q_of_gap(self, y):
        y_lo, y_hi, coef = self._q_table
        y = np.asarray(y, dtype=float)
        if np.any(y > y_hi) or np.any(y < y_lo):
            raise ValueError("gap outside the tabulated range")
        return C.chebval((2.0 * y - y_lo - y_hi) / (y_hi - y_lo), coef)

    def relaxation(self, y):
        """F0(V_inf) - F0(V_inf - y), accurate for tiny y."""
        return self.q_of_gap(y) * y

    def stiffness_bounds(self):
        return stiffness_bounds(self)


@dataclass(frozen=True)
class LinearForceModel:
    """Synthetic drag F0(V) = E + slope*(V - V_inf), used to isolate the dynamics."""

    slope: float
    V_inf: float
    V0: float
    d: int = 3
    p: float = 1.0

    @property
    def gamma(self):
        return self.V_inf - self.V0

    @property
    def E(self):
        return self.slope * self.V_inf

    def f0(self, V, rel_tol=None):
        return self.E + self.slope * (V - self.V_inf)

    def f0_prime(self, V, rel_tol=None):
        return self.slope

    def q_of_gap(self, y):
        return np.full_like(np.asarray(y, dtype=float), self.slope)

    def relaxation(self, y):
        return self.slope * np.asarray(y, dtype=float)

    def stiffness_bounds(self):
        return stiffness_bounds(self)


def f0_force(model, V):
    return model.f0(V)


def lateral_force(model, V):
    return model.lateral_force(V)


def equilibrium_velocity(model, E):
    """Velocity at which the undisturbed-gas drag equals the drive E."""
    if E < 0:
        raise ValueError("drive must be nonnegative")
    if E == 0:
        return 0.0
    tol = 1e-10 * max(1.0, E)

    def resid(V):
        return model.f0(V, 1e-13) - E

    hi = 1.0
    doublings = 0
    while resid(hi) < 0:
        hi *= 2.0
        doublings += 1
        if doublings > 40:
            raise ValueError("bracket growth exceeded 2**40")
    V = optimize.brentq(resid, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    if abs(resid(V)) > tol:
        raise ArithmeticError(f"equilibrium residual {resid(V)!r} above tolerance")
    return V


def stiffness_bounds(model, n=101):
    """Min and max of F0' over [V0, V_inf] by central differences."""
    if not model.V_inf > model.V0:
        raise ValueError("need V0 < V_inf")
    h = 1e-5 * max(1.0, model.gamma)
    vs = np.linspace(model.V0, model.V_inf, n)
    slopes = np.array([(model.f0(v + h, 1e-13) - model.f0(v - h, 1e-13)) / (2.0 * h) for v in vs])
    B0, Binf = float(slopes.min()), float(slopes.max())
    if not B0 > 0:
        raise ValueError(f"nonpositive stiffness {B0}; the drag is not increasing")
    return B0, Binf
