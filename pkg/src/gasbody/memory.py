"""Force from gas particles that already hit the body and come back (the memory force)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import chebyshev as C

from . import quad
from .kernel import PerpMode
from .motion import Face


@dataclass(frozen=True)
class MemoryConfig:
    depth: int = 2
    perp_mode: PerpMode = PerpMode.EXACT_DISC
    u_quad_points: int = 48
    inner_points: int = 16
    rel_tol: float = 1e-9
    chunk_rows: int = 4096

    def __post_init__(self):
        object.__setattr__(self, "perp_mode", PerpMode(self.perp_mode))
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if self.u_quad_points < 16:
            raise ValueError("need at least 16 velocity nodes")
        if self.inner_points < 4:
            raise ValueError("need at least 4 inner velocity nodes")


@dataclass(frozen=True)
class PrecollisionRecord:
    tau: float
    face: Face
    u_x: float
    perp_weight: float


def perp_factor(profile, dt, r, mode=PerpMode.EXACT_DISC):
    return profile.return_fraction(dt, r, mode)


def emission_direct(kernel, a0, sign, v, W):
    """Diffuse source J(v, W): integral over incident relative speeds zeta of k(v, zeta)*a0(W - sign*zeta)."""
    v = np.asarray(v, dtype=float)
    W = np.asarray(W, dtype=float)
    x, w = quad.halfline_rule()
    return np.sum(w * kernel.k(v[..., None], x) * a0(W[..., None] - sign * x), axis=-1)


class EmissionTable:
    """Tabulated diffuse source: linear in v on a quadratically graded grid, Chebyshev in W."""

    def __init__(self, kernel, a0, sign, vmax, W_lo, W_hi, nv=257, nW=17):
        self.kernel, self.a0, self.sign = kernel, a0, sign
        self.v = vmax * np.linspace(0.0, 1.0, nv) ** 2
        self.W_lo, self.W_hi = W_lo, W_hi
        xc = np.cos(np.pi * (np.arange(nW) + 0.5) / nW)
        Wn = 0.5 * (W_lo + W_hi) + 0.5 * (W_hi - W_lo) * xc
        vals = emission_direct(kernel, a0, sign, self.v[None, :], Wn[:, None])
        self.coef = C.chebfit(xc, vals, nW - 1)

    def __call__(self, v, W):
        v = np.asarray(v, dtype=float)
        W = np.asarray(W, dtype=float)
        out = np.empty(np.broadcast(v, W).shape)
        v, W = np.broadcast_to(v, out.shape), np.broadcast_to(W, out.shape)
        inside = (v >= 0) & (v <= self.v[-1]) & (W >= self.W_lo) & (W <= self.W_hi)
        if not np.all(inside):
            out[~inside] = emission_direct(self.kernel, self.a0, self.sign, v[~inside], W[~inside])
        if np.any(inside):
            vi, Wi = v[inside], W[inside]
            idx = np.clip(np.searchsorted(self.v, vi), 1, self.v.size - 1)
            theta = (vi - self.v[idx - 1]) / (self.v[idx] - self.v[idx - 1])
            c = (1.0 - theta) * self.coef[:, idx - 1] + theta * self.coef[:, idx]
            x = (2.0 * Wi - self.W_lo - self.W_hi) / (self.W_hi - self.W_lo)
            out[inside] = C.chebval(x, c, tensor=False)
        return out


class _Context:
    def __init__(self, motion, model, cfg):
        self.motion, self.model, self.cfg = motion, model, cfg
        gmax = max(float(np.max(motion.gap)), 1e-300)
        span = 1.05 * gmax
        ref = motion.ref
        self.right = EmissionTable(model.kernel, model.a0, 1.0, span, ref - span, ref + 0.05 * span)
        self.left = EmissionTable(model.kernel, model.a0, -1.0, span, ref - span, ref + 0.05 * span)
        self.inner_x, self.inner_w = quad.graded_rule(cfg.inner_points)

    def perp(self, dt):
        m = self.model
        return m.perp.return_fraction(dt, m.r, self.cfg.perp_mode)


def _excess(ctx, t_rows, Z, depth, table=None):
    """Incoming density minus a0 at times t_rows and gaps Z (= V_inf - u), face-averaged."""
    out = np.zeros(Z.shape)
    if depth <= 0 or Z.size == 0:
        return out
    chunk = ctx.cfg.chunk_rows
    if t_rows.size > chunk and table is None:
        for i in range(0, t_rows.size, chunk):
            out[i:i + chunk] = _excess(ctx, t_rows[i:i + chunk], Z[i:i + chunk], depth)
        return out
    mot, model = ctx.motion, ctx.model
    if table is None:
        table = mot.window_table(t_rows)
    tau, sign = mot.latest_roots(t_rows, Z, table)
    ok = np.isfinite(tau) & (tau < t_rows[:, None])
    if not np.any(ok):
        return out
    r_idx, _ = np.nonzero(ok)
    tau, sg, z = tau[ok], sign[ok], Z[ok]
    ref = mot.ref
    g_tau = mot.gap_at(tau)
    v = sg * (g_tau - z)
    alpha = model.alpha
    a0 = model.a0
    spec_z = 2.0 * g_tau - z
    src = np.where(sg > 0, ctx.right(np.maximum(v, 0.0), ref - g_tau), ctx.left(np.maximum(v, 0.0), ref - g_tau))
    plus = alpha * a0(ref - spec_z) + (1.0 - alpha) * src
    if depth >= 2:
        spec_part, diffuse = _inner(ctx, tau, sg, g_tau, spec_z, v, depth - 1)
        plus = plus + alpha * spec_part + (1.0 - alpha) * diffuse
    w = ctx.perp(t_rows[r_idx] - tau)
    out[ok] = w * (plus - a0(ref - z))
    return out


def _inner(ctx, tau, sg, g_tau, spec_z, v, depth):
    """Excess density at the earlier collision: specular image and diffuse integral."""
    spec_part = np.empty(tau.size)
    diffuse = np.empty(tau.size)
    chunk = ctx.cfg.chunk_rows
    for i in range(0, tau.size, chunk):
        sl = slice(i, i + chunk)
        t, s, g = tau[sl], sg[sl], g_tau[sl]
        table = ctx.motion.window_table(t)
        means = table[1]
        edge = np.where(s > 0, means.max(axis=1), means.min(axis=1))
        ext = np.maximum(s * (edge - g), 0.0)
        zin = g[:, None] + (s * ext)[:, None] * ctx.inner_x[None, :]
        Zin = np.concatenate([zin, spec_z[sl, None]], axis=1)
        din = _excess(ctx, t, Zin, depth, table)
        ker = ctx.model.kernel.k(v[sl, None], g[:, None] - zin)
        diffuse[sl] = ext * np.sum(ctx.inner_w * ker * din[:, :-1], axis=1)
        spec_part[sl] = din[:, -1]
    return spec_part, diffuse


def _check_consistent(motion, model):
    if abs(motion.ref - model.V_inf) > 1e-12 * max(1.0, abs(model.V_inf)):
        raise ValueError("motion reference differs from the model's equilibrium velocity")
    if abs(motion.gap[0] - model.gamma) > 1e-9 * max(1.0, model.gamma):
        raise ValueError("motion does not start at the model's initial velocity")


def incoming_density(motion, t, face, u_x, model, cfg, depth_left):
    """Face-averaged density of particles arriving at the given face at time t with velocity u_x."""
    face = Face(face)
    z = motion.ref - float(u_x)
    gt = float(motion.gap_at(t))
    if (face is Face.RIGHT and z < gt) or (face is Face.LEFT and z > gt):
        raise ValueError("velocity is not incident on that face")
    base = float(model.a0(u_x))
    if depth_left <= 0:
        return base
    ctx = _Context(motion, model, cfg)
    return base + float(_excess(ctx, np.array([float(t)]), np.array([[z]]), depth_left)[0, 0])


@dataclass(frozen=True)
class MemoryCurve:
    times: np.ndarray
    right: np.ndarray
    left: np.ndarray

    @property
    def total(self):
        return self.right + self.left


def recollision_curve(motion, model, cfg=MemoryConfig(), times=None, block=48):
    """Memory force split by face, at the grid times (or the given times)."""
    _check_consistent(motion, model)
    ctx = _Context(motion, model, cfg)
    times = motion.times if times is None else np.asarray(times, dtype=float)
    x, w = quad.graded_rule(cfg.u_quad_points)
    right = np.zeros(times.size)
    left = np.zeros(times.size)
    area = model.face_area
    for i in range(0, times.size, block):
        t = times[i:i + block]
        pos = t > 0
        if not np.any(pos):
            continue
        t = t[pos]
        table = motion.window_table(t)
        means, gt = table[1], table[2]
        # gaps are stored below ref, so spreads of a few ulps of ref are rounding, not motion
        floor = 8.0 * np.finfo(float).eps * motion.ref
        hi = means.max(axis=1) - gt
        lo = gt - means.min(axis=1)
        hi = np.where(hi > floor, hi, 0.0)
        lo = np.where(lo > floor, lo, 0.0)
        for ext, sg, dest in ((hi, 1.0, right), (lo, -1.0, left)):
            if not np.any(ext > 0):
                continue
            off = ext[:, None] * x[None, :]
            Z = gt[:, None] + sg * off
            d = _excess(ctx, t, Z, cfg.depth, table)
            vals = area * ext * np.sum(w * model.ell(off) * d, axis=1)
            block_out = np.zeros(pos.size)
            block_out[pos] = vals
            dest[i:i + block] = block_out
    return MemoryCurve(times, right, left)


def recollision_force(motion, t, model, cfg=MemoryConfig()):
    if not 0.0 < t <= motion.t_max:
        raise ValueError("t outside (0, T_max]")
    return float(recollision_curve(motion, model, cfg, times=np.array([float(t)])).total[0])
