"""Monte Carlo free-molecular simulator used as an independent check on the memory force.

Only the part of the gas disturbed by the body is simulated. Every particle
that leaves an end face at time s is paired with a negative "shadow"
particle carrying the undisturbed density on the same trajectory, so the
pair represents the excess density that the memory force is made of. The
undisturbed gas itself enters only through its mean force F0. Return times
are found by forward flight against the body motion; the perpendicular
position of each return is importance sampled on the face.
"""

from __future__ import annotations

import bisect
import csv
import enum
import heapq
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .dynamics import GridConfig, integrate_motion
from .force import LateralVariant
from .motion import Face, MotionGrid


class Coupling(str, enum.Enum):
    PRESCRIBED = "PrescribedMotion"
    SELF_CONSISTENT = "SelfConsistent"


LATERAL = "Lateral"
GROUPS = 64


def _speed_quantile(model, q=1.0 - 1e-6):
    axial = float(model.a0.ppf(1.0 - 0.5 * (1.0 - q)))
    n = model.d - 1
    perp = model.perp.sigma * math.sqrt(2.0 * special.gammaincinv(0.5 * n, q)) if n > 0 else 0.0
    return math.hypot(axial, perp)


@dataclass(frozen=True)
class McConfig:
    n_particles: int = 100_000
    domain_halflength: float | None = None
    r: float = 1.0
    cyl_length: float = 1.0
    d: int = 3
    seed: int = 0
    t_max: float = 400.0
    output_times: np.ndarray | None = None
    coupling: Coupling = Coupling.PRESCRIBED
    max_generations: int = 3
    threads: int = 1
    batch_size: int = 1 << 14
    max_speed: float | None = None
    max_body_speed: float = 0.0
    lateral_samples: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "coupling", Coupling(self.coupling))
        if self.n_particles < GROUPS:
            raise ValueError(f"need at least {GROUPS} particles")
        if not (self.r > 0 and self.cyl_length > 0 and self.t_max > 0):
            raise ValueError("radius, length and t_max must be positive")
        if self.d < 2:
            raise ValueError("dimension must be at least 2")
        if self.max_generations < 1 or self.threads < 1 or self.batch_size < 1:
            raise ValueError("generations, threads and batch size must be positive")
        if self.output_times is not None:
            t = np.asarray(self.output_times, dtype=float)
            if t.ndim != 1 or t.size < 2 or t[0] != 0.0 or np.any(np.diff(t) <= 0) or t[-1] > self.t_max:
                raise ValueError("output_times must increase from 0 and stay within t_max")
            object.__setattr__(self, "output_times", t)
        if self.max_speed is not None:
            need = self.required_halflength(self.max_speed, self.max_body_speed)
            if self.domain_halflength is None:
                object.__setattr__(self, "domain_halflength", 1.05 * need)
            elif self.domain_halflength < need:
                raise ValueError(f"domain half-length {self.domain_halflength} below the {need} needed "
                                 "to keep fresh particles away from the body until t_max")

    def required_halflength(self, max_speed, body_speed):
        return (max_speed + body_speed) * self.t_max + 0.5 * self.cyl_length + self.r

    @classmethod
    def for_model(cls, model, **kw):
        """Config with geometry taken from the model and the domain sized by its speed quantile."""
        kw.setdefault("r", model.r)
        kw.setdefault("cyl_length", model.cyl_length)
        kw.setdefault("d", model.d)
        kw.setdefault("max_speed", _speed_quantile(model))
        kw.setdefault("max_body_speed", max(abs(model.V0), abs(model.V_inf)))
        return cls(**kw)


@dataclass(frozen=True)
class Particles:
    x: np.ndarray
    v: np.ndarray
    weight: float


def _rng(seed, stream):
    return np.random.Generator(np.random.Philox(key=np.array([seed & (2**64 - 1), stream], dtype=np.uint64)))


def sample_initial(model, cfg, rng, n=None):
    """Undisturbed gas in the box [-L, L]^d outside the body."""
    n = cfg.n_particles if n is None else n
    L = cfg.domain_halflength
    if L is None:
        raise ValueError("config has no domain size; build it with McConfig.for_model")
    xs = []
    have = 0
    while have < n:
        x = rng.uniform(-L, L, size=(2 * (n - have) + 16, cfg.d))
        inside = (np.abs(x[:, 0]) <= 0.5 * cfg.cyl_length) & (np.sum(x[:, 1:] ** 2, axis=1) <= cfg.r**2)
        x = x[~inside]
        xs.append(x[: n - have])
        have += xs[-1].shape[0]
    x = np.concatenate(xs)
    v = np.empty((n, cfg.d))
    v[:, 0] = model.a0.sample(rng, n)
    v[:, 1:] = model.perp.sample(rng, n)
    volume = (2.0 * L) ** cfg.d - model.face_area * cfg.cyl_length
    return Particles(x, v, volume * model.a0.mass / n)


def reflect(model, face, V_body, u, rng, normal=None):
    """Outgoing velocity of a particle with incident velocity u hitting the given surface."""
    u = np.array(u, dtype=float)
    out = u.copy()
    if face == LATERAL:
        if normal is None:
            raise ValueError("lateral reflection needs the outward normal")
        normal = np.asarray(normal, dtype=float)
        un = float(np.dot(u[1:], normal))
        if un > 0:
            raise ValueError("velocity is not incident on the lateral surface")
        if rng.random() < model.alpha_lateral:
            out[1:] = u[1:] - 2.0 * un * normal
            return out
        # diffuse wall: axial part drawn from the gas law, relative to the body for the monotone variant
        vx = float(model.a0.sample(rng, 1)[0])
        if model.lateral_variant is LateralVariant.MONOTONE:
            vx += V_body
        tang = model.perp.sample(rng, 1)[0]
        tang -= np.dot(tang, normal) * normal
        speed_n = model.perp.sigma * math.sqrt(-2.0 * math.log(1.0 - rng.random()))
        out[0] = vx
        out[1:] = tang + speed_n * normal
        return out
    face = Face(face)
    rel = u[0] - V_body
    if (face is Face.RIGHT and rel > 0) or (face is Face.LEFT and rel < 0):
        raise ValueError("velocity is not incident on that face")
    if rng.random() < model.alpha:
        out[0] = 2.0 * V_body - u[0]
        return out
    speed = float(model.kernel.sample_outgoing(abs(rel), 1.0 - rng.random()))
    out[0] = V_body + (speed if face is Face.RIGHT else -speed)
    out[1:] = model.perp.sample(rng, 1)[0]
    return out


def _ball(rng, m, n, r):
    if n == 0:
        return np.zeros((m, 0))
    g = rng.standard_normal((m, n))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * (r * rng.random(m) ** (1.0 / n))[:, None]


def _illinois(f, a, b, fa, fb, iters=80):
    """Vectorised regula falsi with the Illinois fix; fa > 0 >= fb on entry."""
    a, b, fa, fb = (np.array(x, dtype=float) for x in (a, b, fa, fb))
    for _ in range(iters):
        den = fb - fa
        c = np.where(den != 0, b - fb * (b - a) / np.where(den != 0, den, 1.0), 0.5 * (a + b))
        c = np.clip(c, np.minimum(a, b), np.maximum(a, b))
        fc = f(c)
        left = fc > 0
        # root in [c, b]: move a and damp the kept end
        fb = np.where(left, fb * 0.5, fb)
        a, fa = np.where(left, c, a), np.where(left, fc, fa)
        # root in [a, c]: move b
        b_new = np.where(left, b, c)
        fb = np.where(left, fb, fc)
        fa = np.where(left, fa, fa * 0.5)
        b = b_new
        if np.all(np.abs(b - a) <= 1e-14 * np.maximum(1.0, np.abs(b))):
            break
    return b


class _Source:
    """Sampling of the excess flux leaving an end face."""

    def __init__(self, model):
        self.model = model
        self.a0 = model.a0
        self.kernel = model.kernel
        self.alpha = model.alpha
        self.n = model.d - 1

    def incident(self, W, face, U):
        """Relative speed of an undisturbed particle hitting the face, and the mass it is drawn from."""
        F = self.a0.cdf(W)
        mass = self.a0.mass
        right = face > 0
        q = np.where(right, U * F, F + U * (1.0 - F))
        u = self.a0.ppf(np.clip(q, 1e-300, 1.0 - 1e-16))
        zeta = np.abs(W - u)
        return zeta, mass * np.where(right, F, 1.0 - F)

    def net_density(self, W, face, v, zeta, part_mass):
        """Excess outgoing flux density at relative speed v: emitted minus undisturbed."""
        out_u = W + face * v
        in_u = W - face * v
        diffuse = (1.0 - self.alpha) * part_mass * v * self.kernel.k(v, zeta)
        return diffuse + self.alpha * v * self.a0(in_u) - v * self.a0(out_u)

    def impulse(self, zeta, face):
        """Mean drag carried by one particle hitting a face at relative speed zeta."""
        return face * self.model.ell(zeta) / zeta


@dataclass
class McResult:
    times: np.ndarray
    V: np.ndarray
    sigma_V: np.ndarray
    R_est: np.ndarray
    sigma_R: np.ndarray
    n_events_end: np.ndarray
    n_events_lateral: np.ndarray
    lateral_impulse: float
    sigma_lateral: float
    coupling: Coupling
    extras: dict = field(default_factory=dict)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "V", "sigma_V", "R_est", "sigma_R", "n_events_end", "n_events_lateral"])
        for row in zip(self.times, self.V, self.sigma_V, self.R_est, self.sigma_R,
                       self.n_events_end, self.n_events_lateral):
            w.writerow([f"{x:.17g}" for x in row[:5]] + [int(row[5]), int(row[6])])
        return buf.getvalue()


def _jackknife(group_sums):
    """Total and jackknife standard error from per-group sums (groups along axis 0)."""
    g = group_sums.shape[0]
    total = group_sums.sum(axis=0)
    loo = (total[None] - group_sums) * (g / (g - 1.0))
    return total, np.sqrt((g - 1.0) / g * np.sum((loo - loo.mean(axis=0)) ** 2, axis=0))


def _emission_times(rng, m, rate, T):
    """Mixture of an exponential (early, where most returns start) and a uniform law on [0, T]."""
    norm = -math.expm1(-rate * T)
    early = rng.random(m) < 0.5
    U = rng.random(m)
    s = np.where(early, -np.log1p(-U * norm) / rate, U * T)
    q = 0.5 * rate * np.exp(-rate * s) / norm + 0.5 / T
    return s, q


class _Prescribed:
    """Vectorised flights against a fixed motion."""

    def __init__(self, model, cfg, motion, edges):
        self.model, self.cfg, self.motion, self.edges = model, cfg, motion, edges
        self.src = _Source(model)
        self.nodes = motion.times
        self.node_prefix = motion.gap_prefix
        g = motion.gap
        self.left_possible = bool(np.any(np.diff(g) > 0))
        self.T = motion.t_max
        self.rate = 2.0 * model.f0_prime(model.V_inf)

    def _windows(self, s):
        """Window means of the gap from s to every later node; +-inf where the node is not later."""
        ps = self.motion.gap_prefix_at(s)
        dt = self.nodes[None, :] - s[:, None]
        later = dt > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            m = (self.node_prefix[None, :] - ps[:, None]) / np.where(later, dt, 1.0)
        return m, later, ps

    def _returns(self, s, z, face):
        """First time after s when the window mean of the gap reaches z; nan if none before T."""
        m, later, ps = self._windows(s)
        e = face[:, None] * (m - z[:, None])
        hit = later & (e <= 0)
        any_hit = hit.any(axis=1)
        k = np.argmax(hit, axis=1)
        out = np.full(s.size, np.nan)
        if not np.any(any_hit):
            return out
        idx = np.nonzero(any_hit)[0]
        k = k[idx]
        si, zi, fi, psi = s[idx], z[idx], face[idx], ps[idx]
        prev_later = (k > 0) & (self.nodes[np.maximum(k - 1, 0)] > si)
        a = np.where(prev_later, self.nodes[np.maximum(k - 1, 0)], si)
        g_s = self.motion.gap_at(si)
        fa = np.where(prev_later, e[idx, np.maximum(k - 1, 0)], fi * (g_s - zi))
        b = self.nodes[k]
        fb = e[idx, k]

        def f(t):
            return fi * ((self.motion.gap_prefix_at(t) - psi) / (t - si) - zi)

        with np.errstate(invalid="ignore", divide="ignore"):
            out[idx] = _illinois(f, a, b, fa, fb)
        return out

    def _z_proposal(self, rng, s, face, g_s):
        """Target gap coordinate of the flight: log-uniform between the reachable extremes."""
        m, later, _ = self._windows(s)
        lo = np.where(later, m, np.inf).min(axis=1)
        hi = np.where(later, m, -np.inf).max(axis=1)
        U = rng.random(s.size)
        right = face > 0
        # right face: z in (lo, g_s); left face: z - g_s in (0, hi - g_s)
        lo_r = np.maximum(lo * (1.0 - 1e-12), 1e-300)
        with np.errstate(invalid="ignore"):
            # no later node leaves lo infinite; span is then nan and the proposal gets zero density
            span = np.log(np.maximum(g_s, lo_r) / lo_r)
        z_r = lo_r * np.exp(U * span)
        q_r = np.where(span > 0, 1.0 / (z_r * np.where(span > 0, span, 1.0)), 0.0)
        width = np.maximum(hi - g_s, 0.0)
        z_l = g_s + U * width
        q_l = np.where(width > 0, 1.0 / np.where(width > 0, width, 1.0), 0.0)
        return np.where(right, z_r, z_l), np.where(right, q_r, q_l)

    def _perp(self, rng, x_e, dt):
        n = self.src.n
        x_r = _ball(rng, dt.size, n, self.model.r)
        if n == 0:
            return x_r, np.ones(dt.size)
        vperp = (x_r - x_e) / dt[:, None]
        return x_r, self.model.face_area * self.model.perp.density(vperp) / dt**n

    def batch(self, b, size):
        cfg, model, src, mot = self.cfg, self.model, self.src, self.motion
        rng = _rng(cfg.seed, b)
        K = self.edges.size
        R = np.zeros((GROUPS, K))
        counts = np.zeros(K, dtype=np.int64)
        gid = (b * cfg.batch_size + np.arange(size)) % GROUPS
        s, q_s = _emission_times(rng, size, self.rate, self.T)
        if self.left_possible:
            face = np.where(rng.random(size) < 0.5, 1.0, -1.0)
            p_face = 0.5
        else:
            face = np.ones(size)
            p_face = 1.0
        W = mot.value_at(s)
        g_s = mot.gap_at(s)
        zeta, part_mass = src.incident(W, face, rng.random(size))
        z, q_z = self._z_proposal(rng, s, face, g_s)
        v = face * (g_s - z)
        ok = (q_z > 0) & (v > 0)
        dens = np.where(ok, src.net_density(W, face, np.where(ok, v, 1.0), zeta, part_mass), 0.0)
        w = np.where(ok, dens * model.face_area / (q_s * p_face * np.where(ok, q_z, 1.0)), 0.0)
        w /= cfg.n_particles
        x_e = _ball(rng, size, src.n, model.r)
        vperp = None
        for gen in range(cfg.max_generations):
            live = w != 0
            t_r = np.full(s.size, np.nan)
            if np.any(live):
                t_r[live] = self._returns(s[live], z[live], face[live])
            # a root at s itself (z rounded onto the emission gap) is the departure, not a return
            back = np.isfinite(t_r) & (t_r > s)
            if not np.any(back):
                break
            s, z, face, w, x_e, gid = (a[back] for a in (s, z, face, w, x_e, gid))
            t_r = t_r[back]
            dt = t_r - s
            if vperp is None:
                x_r, pf = self._perp(rng, x_e, dt)
                w = w * pf
            else:
                vp = vperp[back]
                x_r = x_e + vp * dt[:, None]
                w = np.where(np.sum(x_r**2, axis=1) <= model.r**2, w, 0.0)
            g_r = mot.gap_at(t_r)
            zeta_r = face * (z - g_r)
            good = zeta_r > 0
            imp = np.where(good, src.impulse(np.where(good, zeta_r, 1.0), face), 0.0)
            bins = np.clip(np.searchsorted(self.edges, t_r, side="left"), 1, K - 1)
            np.add.at(R, (gid, bins), w * imp)
            np.add.at(counts, bins, (w != 0).astype(np.int64))
            if gen + 1 == cfg.max_generations:
                break
            # re-emission of the returning excess from the face it hit
            m = t_r.size
            spec = rng.random(m) < model.alpha
            z_new, q_new = self._z_proposal(rng, t_r, face, g_r)
            v_new = face * (g_r - z_new)
            okd = (q_new > 0) & (v_new > 0) & good
            kd = model.kernel.k(np.where(okd, v_new, 1.0), np.where(good, zeta_r, 1.0))
            w_d = np.where(okd, w * v_new * kd / np.where(good, zeta_r, 1.0) / np.where(okd, q_new, 1.0), 0.0)
            z = np.where(spec, g_r - face * zeta_r, z_new)
            w = np.where(spec, np.where(good, w, 0.0), w_d)
            vperp_in = (x_r - x_e) / dt[:, None] if vperp is None else vperp[back]
            if np.any(spec):
                # specular children keep their perpendicular velocity, so hits are checked directly;
                # diffuse ones in the same generation then draw theirs from the profile
                vperp = np.where(spec[:, None], vperp_in, model.perp.sample(rng, m))
            else:
                vperp = None
            s, x_e = t_r, x_r
        return R, counts

    def run(self):
        cfg = self.cfg
        nb = -(-cfg.n_particles // cfg.batch_size)
        sizes = [min(cfg.batch_size, cfg.n_particles - b * cfg.batch_size) for b in range(nb)]
        if cfg.threads > 1:
            with ThreadPoolExecutor(cfg.threads) as ex:
                parts = list(ex.map(self.batch, range(nb), sizes))
        else:
            parts = [self.batch(b, m) for b, m in zip(range(nb), sizes)]
        R = sum(p[0] for p in parts)
        counts = sum(p[1] for p in parts)
        return R, counts


class _SelfConsistent:
    """Single event timeline: the body gap responds linearly to each returning impulse."""

    def __init__(self, model, cfg, edges):
        self.model, self.cfg, self.edges = model, cfg, edges
        self.src = _Source(model)
        self.B = float(model.f0_prime(model.V_inf))
        B0, Binf = model.stiffness_bounds()
        t0 = max(math.log(B0 / model.gamma**model.p) / (2.0 * Binf), 0.05)
        times = np.union1d(GridConfig(t_max=cfg.t_max).build(t0), edges)
        self.det = integrate_motion(model, np.zeros(times.size), times)
        self.nodes = times
        self._t, self._g = times.tolist(), self.det.gap.tolist()
        self._m, self._P = self.det.slopes.tolist(), self.det.gap_prefix.tolist()
        self.T = cfg.t_max
        # state of the perturbation: gap excess S and its running integral I at time tau
        self.tau, self.S, self.I = 0.0, 0.0, 0.0
        self.S_g = np.zeros(GROUPS)
        self.I_g = np.zeros(GROUPS)

    def _decay(self, t):
        return math.exp(-self.B * (t - self.tau))

    def _cell(self, t):
        return min(max(bisect.bisect_right(self._t, t) - 1, 0), len(self._t) - 2)

    def gap(self, t):
        c = self._cell(t)
        return self._g[c] + self._m[c] * (t - self._t[c]) + self.S * self._decay(t)

    def prefix(self, t):
        """Running integral of the gap; valid for t >= tau."""
        c = self._cell(t)
        x = t - self._t[c]
        det = self._P[c] + x * (self._g[c] + 0.5 * self._m[c] * x)
        return det + self.I + self.S * -math.expm1(-self.B * (t - self.tau)) / self.B

    def advance(self, t):
        e = self._decay(t)
        self.I += self.S * (1.0 - e) / self.B
        self.S *= e
        self.I_g += self.S_g * (1.0 - e) / self.B
        self.S_g *= e
        self.tau = t

    def next_return(self, s, ps, z, face, start):
        """First t > start with the mean gap over [s, t] equal to z, or nan."""
        k0 = int(np.searchsorted(self.nodes, start, side="right"))
        if k0 >= self.nodes.size:
            return math.nan
        nodes = self.nodes[k0:]
        P = self.det.gap_prefix[k0:] + self.I - self.S * np.expm1(-self.B * (nodes - self.tau)) / self.B
        e = face * ((P - ps) / (nodes - s) - z)
        hit = np.flatnonzero(e <= 0)
        if hit.size == 0:
            return math.nan
        k = int(hit[0])
        if start > s:
            fa = face * ((self.prefix(start) - ps) / (start - s) - z)
        else:
            fa = face * (self.gap(s) - z)
        if fa <= 0:
            return start
        a, b = (start, fa) if k == 0 else (float(nodes[k - 1]), float(e[k - 1]))
        lo, flo, hi, fhi = a, b, float(nodes[k]), float(e[k])
        # scalar Illinois iteration on the bracket [lo, hi]
        for _ in range(100):
            c = hi - fhi * (hi - lo) / (fhi - flo) if fhi != flo else 0.5 * (lo + hi)
            if not lo < c < hi:
                c = 0.5 * (lo + hi)
            fc = face * ((self.prefix(c) - ps) / (c - s) - z)
            if fc > 0:
                lo, flo = c, fc
                fhi *= 0.5
            else:
                hi, fhi = c, fc
                flo *= 0.5
            if hi - lo <= 1e-14 * hi or fc == 0:
                break
        return hi

    def run(self):
        cfg, model, src = self.cfg, self.model, self.src
        K = self.edges.size
        R = np.zeros((GROUPS, K))
        counts = np.zeros(K, dtype=np.int64)
        V_g = np.zeros((GROUPS, K))
        I_g = np.zeros((GROUPS, K))
        out_k = 1
        n = cfg.n_particles
        rng = _rng(cfg.seed, 0)
        s_all, q_all = _emission_times(rng, n, self.B * 2.0, self.T)
        order = np.argsort(s_all, kind="stable")
        U_in, U_z = rng.random(n), rng.random(n)
        x_all = _ball(rng, n, src.n, model.r)
        child_rng = _rng(cfg.seed, 1 << 32)
        heap = []
        seq = 0
        det_lo = self.det.gap_prefix
        for i in order:
            heap.append((float(s_all[i]), seq, 0, int(i)))
            seq += 1
        heapq.heapify(heap)
        flights = {}
        n_face = src.n
        while heap:
            t, _, kind, key = heapq.heappop(heap)
            if t > self.T:
                break
            while out_k < K and self.edges[out_k] <= t:
                self._record(V_g, I_g, out_k)
                out_k += 1
            if kind == 0:
                # fresh emission from the right face at time t
                s = t
                g_s = self.gap(s)
                W = model.V_inf - g_s
                zeta, pm = src.incident(np.array([W]), np.array([1.0]), np.array([U_in[key]]))
                k_next = np.searchsorted(self.nodes, s, side="right")
                tail = self.nodes[k_next:]
                if tail.size == 0 or g_s <= 0:
                    continue
                lo = 0.5 * float(np.min((det_lo[k_next:] - self.det.gap_prefix_at(s)) / (tail - s)))
                lo = max(lo, 1e-300)
                if lo >= g_s:
                    continue
                span = math.log(g_s / lo)
                z = lo * math.exp(U_z[key] * span)
                v = g_s - z
                dens = float(src.net_density(W, 1.0, v, zeta[0], pm[0]))
                w = dens * model.face_area * z * span / (q_all[key] * n)
                self._launch(heap, flights, seq, s, z, 1.0, w, key % GROUPS, 1, x_all[key], None)
                seq += 1
                continue
            s, ps, z, face, w, grp, gen, x_e, vperp = flights[key]
            t_new = self.next_return(s, ps, z, face, max(self.tau, s))
            if not np.isfinite(t_new):
                del flights[key]
                continue
            if t_new > t * (1.0 + 1e-12) + 1e-15:
                heapq.heappush(heap, (t_new, key, 1, key))
                continue
            del flights[key]
            t_r = max(t_new, self.tau)
            dt = t_r - s
            if not dt > 0:
                continue
            self.advance(t_r)
            if vperp is None:
                x_r = _ball(child_rng, 1, n_face, model.r)[0]
                if n_face:
                    w *= model.face_area * float(model.perp.density((x_r - x_e) / dt)) / dt**n_face
            else:
                x_r = x_e + vperp * dt
                if np.sum(x_r**2) > model.r**2:
                    continue
            g_r = self.gap(t_r)
            zeta_r = face * (z - g_r)
            if zeta_r <= 0:
                continue
            J = w * float(src.impulse(zeta_r, face))
            self.S += J
            self.S_g[grp] += J
            b = min(max(int(np.searchsorted(self.edges, t_r, side="left")), 1), K - 1)
            R[grp, b] += J
            counts[b] += 1
            if gen >= cfg.max_generations:
                continue
            # the child leaves relative to the body after the kick
            g_r = self.gap(t_r)
            if child_rng.random() < model.alpha:
                if face * (g_r - zeta_r) <= 0:
                    continue
                self._launch(heap, flights, seq, t_r, g_r - face * zeta_r, face, w, grp, gen + 1, x_r,
                             (x_r - x_e) / dt if vperp is None else vperp)
                seq += 1
                continue
            k_next = np.searchsorted(self.nodes, t_r, side="right")
            tail = self.nodes[k_next:]
            if tail.size == 0:
                continue
            lo = 0.5 * float(np.min((det_lo[k_next:] - self.det.gap_prefix_at(t_r)) / (tail - t_r)))
            lo = max(lo, 1e-300)
            if not 0 < lo < g_r:
                continue
            span = math.log(g_r / lo)
            z_new = lo * math.exp(child_rng.random() * span)
            v_new = g_r - z_new
            w_new = w * v_new * float(model.kernel.k(v_new, zeta_r)) / zeta_r * z_new * span
            self._launch(heap, flights, seq, t_r, z_new, face, w_new, grp, gen + 1, x_r, None)
            seq += 1
        while out_k < K:
            self._record(V_g, I_g, out_k)
            out_k += 1
        return R, counts, V_g, np.diff(I_g, axis=1, prepend=0.0)

    def _record(self, V_g, I_g, k):
        e = math.exp(-self.B * (self.edges[k] - self.tau))
        V_g[:, k] = self.S_g * e
        I_g[:, k] = self.I_g + self.S_g * (1.0 - e) / self.B

    def _launch(self, heap, flights, key, s, z, face, w, grp, gen, x_e, vperp):
        ps = float(self.prefix(s))
        flights[key] = (s, ps, z, face, w, grp, gen, x_e, vperp)
        t = self.next_return(s, ps, z, face, s)
        if np.isfinite(t):
            heapq.heappush(heap, (t, key, 1, key))
        else:
            del flights[key]


def _lateral(model, cfg, edges, V_of):
    """Undisturbed particles hitting the lateral surface: axial drag per hit, tallied per bin."""
    K = edges.size
    m = cfg.lateral_samples if cfg.lateral_samples is not None else max(1000, cfg.n_particles // 10)
    m = max(m, GROUPS)
    rng = _rng(cfg.seed, (1 << 32) + 1)
    n = model.d - 1
    rate = model.lateral_area * model.a0.mass * model.perp.sigma / math.sqrt(2.0 * math.pi)
    t = rng.random(m) * cfg.t_max
    V = V_of(t)
    counts = np.zeros(K, dtype=np.int64)
    total = np.zeros(GROUPS)
    bins = np.clip(np.searchsorted(edges, t, side="left"), 1, K - 1)
    for i in range(m):
        normal = rng.standard_normal(n)
        normal /= np.linalg.norm(normal)
        u = np.empty(model.d)
        u[0] = model.a0.sample(rng, 1)[0]
        tang = model.perp.sample(rng, 1)[0]
        tang -= np.dot(tang, normal) * normal
        speed_n = model.perp.sigma * math.sqrt(-2.0 * math.log(1.0 - rng.random()))
        u[1:] = tang - speed_n * normal
        out = reflect(model, LATERAL, float(V[i]), u, rng, normal=normal)
        drag = (out[0] - u[0]) * rate * cfg.t_max / m
        total[i % GROUPS] += drag
        counts[bins[i]] += 1
    tot, sig = _jackknife(total[:, None])
    return counts, float(tot[0]), float(sig[0])


def run(model, cfg, prescribed=None):
    """Estimate the memory force (and, when coupled, the body velocity) by simulation."""
    if cfg.d != model.d or cfg.r != model.r:
        raise ValueError("config geometry differs from the model")
    extras = {}
    if cfg.coupling is Coupling.PRESCRIBED:
        if prescribed is None:
            raise ValueError("PrescribedMotion needs a motion")
        if prescribed.t_max < cfg.t_max * (1.0 - 1e-12):
            raise ValueError("prescribed motion ends before t_max")
        edges = cfg.output_times if cfg.output_times is not None else prescribed.times
        sim = _Prescribed(model, cfg, prescribed, edges)
        Rg, counts = sim.run()
        V = prescribed.value_at(edges)
        sigma_V = np.zeros(edges.size)
        V_of = prescribed.value_at
    else:
        if model.gamma < 0:
            raise ValueError("need V0 <= V_inf")
        edges = cfg.output_times
        if edges is None:
            edges = GridConfig(t_max=cfg.t_max).build(0.5)
        if model.gamma == 0:
            Rg = np.zeros((GROUPS, edges.size))
            counts = np.zeros(edges.size, dtype=np.int64)
            V = np.full(edges.size, model.V_inf)
            sigma_V = np.zeros(edges.size)
            V_of = lambda t: np.full(np.shape(t), model.V_inf)  # noqa: E731
        else:
            sim = _SelfConsistent(model, cfg, edges)
            Rg, counts, Vg, Ig = sim.run()
            dy, sigma_V = _jackknife(Vg)
            V = model.V_inf - (sim.det.gap_at(edges) + dy)
            V_of = sim.det.value_at
            widths = np.diff(edges, prepend=-1.0)
            det_mean = np.diff(sim.det.gap_prefix_at(edges), prepend=0.0) / widths
            extra_mean, extra_sig = _jackknife(Ig / widths[None, :])
            gap_mean = det_mean + extra_mean
            gap_mean[0] = sim.det.gap[0]
            extras["gap_bin_mean"] = gap_mean
            extras["sigma_gap_bin_mean"] = extra_sig
    widths = np.diff(edges, prepend=edges[0])
    widths[0] = 1.0
    R_tot, R_sig = _jackknife(Rg / widths[None, :])
    R_tot[0] = R_sig[0] = 0.0
    lat_counts, lat, lat_sig = _lateral(model, cfg, edges, V_of)
    extras["bin_edges"] = edges
    return McResult(edges, V, sigma_V, R_tot, R_sig, counts, lat_counts, lat, lat_sig, cfg.coupling, extras)


def bin_average(times, values, edges):
    """Mean of a positive curve over each interval (edges[k-1], edges[k]); exact for power laws."""
    y = np.maximum(np.interp(edges, times, values), 1e-300)
    out = np.zeros(edges.size)
    ta, tb, ya, yb = edges[:-1], edges[1:], y[:-1], y[1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        lt = np.log(tb / ta)
        k = 1.0 + np.log(yb / ya) / lt
        x = k * lt
        # integral of ya*(t/ta)^(k-1) over [ta, tb], divided by the width
        mean = ya * ta * np.where(np.abs(x) > 1e-12, np.expm1(x) / k, lt) / (tb - ta)
    out[1:] = np.where(ta > 0, mean, 0.5 * (ya + yb))
    return out
