"""Command-line driver: JSON run configs in, CSV and text reports out."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import sys
from dataclasses import dataclass, field

import numpy as np

from . import mc
from .analysis import default_window, fit_tail_exponent, verify_curve
from .dynamics import AssumptionError, GridConfig, fixed_point_solve
from .force import ForceModel, LateralVariant, equilibrium_velocity
from .kernel import InitialDensity, KernelFamily, PerpMode, check_assumptions, make_kernel
from .memory import MemoryConfig
from .motion import MotionGrid

EXIT_OK, EXIT_CONFIG, EXIT_ASSUMPTION, EXIT_CONVERGENCE, EXIT_IO = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class KernelBlock:
    family: str = "GaussFlux"
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DensityBlock:
    kind: str = "gaussian"
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class GridBlock:
    dt: float = 0.02
    t_max: float = 400.0
    ratio: float = 1.05


@dataclass(frozen=True)
class MemoryBlock:
    depth: int = 2
    perp_mode: str = "ExactDisc"


@dataclass(frozen=True)
class SolverBlock:
    tol: float = 1e-8
    max_iter: int = 30
    mixing: int = 0
    damping: float = 1.0


@dataclass(frozen=True)
class McBlock:
    n_particles: int = 100_000
    coupling: str = "PrescribedMotion"
    max_generations: int = 3
    batch_size: int = 1 << 14
    lateral_samples: int | None = None


@dataclass(frozen=True)
class RunConfig:
    kernel: KernelBlock = KernelBlock()
    a0: DensityBlock = DensityBlock()
    alpha: float = 0.0
    alpha_lateral: float = 0.0
    lateral_variant: str = "ZeroLateral"
    d: int = 3
    r: float = 1.0
    cyl_length: float = 1.0
    V_inf: float | None = None
    E: float | None = None
    gamma: float = 0.05
    grid: GridBlock = GridBlock()
    memory: MemoryBlock = MemoryBlock()
    solver: SolverBlock = SolverBlock()
    mc: McBlock | None = None
    seed: int = 0
    output: dict = field(default_factory=dict)

    _BLOCKS = {"kernel": KernelBlock, "a0": DensityBlock, "grid": GridBlock, "memory": MemoryBlock,
               "solver": SolverBlock, "mc": McBlock}

    def __post_init__(self):
        if (self.V_inf is None) == (self.E is None):
            raise ValueError("give exactly one of V_inf and E")
        try:
            KernelFamily(self.kernel.family)
            PerpMode(self.memory.perp_mode)
            LateralVariant(self.lateral_variant)
            if self.mc is not None:
                mc.Coupling(self.mc.coupling)
        except ValueError as exc:
            raise ValueError(str(exc)) from None
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if not 0.0 <= self.alpha_lateral <= 1.0:
            raise ValueError("alpha_lateral must lie in [0, 1]")
        if not isinstance(self.d, int) or self.d < 2:
            raise ValueError("d must be an integer >= 2")
        if not (self.r > 0 and self.cyl_length > 0):
            raise ValueError("r and cyl_length must be positive")
        if not self.gamma >= 0:
            raise ValueError("gamma must be nonnegative")
        if self.E is not None and not self.E >= 0:
            raise ValueError("E must be nonnegative")
        g = self.grid
        if not (g.dt > 0 and g.t_max > g.dt and g.ratio >= 1.0):
            raise ValueError("grid needs dt > 0, t_max > dt and ratio >= 1")
        if self.memory.depth < 1:
            raise ValueError("memory depth must be at least 1")
        s = self.solver
        if not (s.tol > 0 and s.max_iter >= 1 and s.mixing >= 0 and 0 < s.damping <= 1):
            raise ValueError("solver needs tol > 0, max_iter >= 1, mixing >= 0, 0 < damping <= 1")
        if self.mc is not None and not (self.mc.n_particles >= mc.GROUPS and self.mc.max_generations >= 1):
            raise ValueError(f"mc needs n_particles >= {mc.GROUPS} and max_generations >= 1")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ValueError("seed must be a nonnegative integer")

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ValueError("config must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        kw = {}
        for key, value in raw.items():
            block = cls._BLOCKS.get(key)
            if block is not None and value is not None:
                if not isinstance(value, dict):
                    raise ValueError(f"{key} must be an object")
                bad = set(value) - {f.name for f in dataclasses.fields(block)}
                if bad:
                    raise ValueError(f"unknown fields in {key}: {sorted(bad)}")
                value = block(**value)
            kw[key] = value
        return cls(**kw)

    def to_dict(self):
        return dataclasses.asdict(self)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def build_model(self):
        kernel = make_kernel(self.kernel.family, self.kernel.params)
        a0 = InitialDensity(self.a0.kind, self.a0.params)
        common = dict(kernel=kernel, a0=a0, alpha=self.alpha, d=self.d, r=self.r,
                      cyl_length=self.cyl_length, lateral_variant=self.lateral_variant,
                      alpha_lateral=self.alpha_lateral)
        if self.V_inf is not None:
            return ForceModel(V_inf=self.V_inf, V0=self.V_inf - self.gamma, **common)
        probe = ForceModel(V_inf=1.0, V0=1.0 - self.gamma, **common)
        V_inf = equilibrium_velocity(probe, self.E)
        return probe.with_velocities(V_inf, V_inf - self.gamma)


def load_config(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config {path}: {exc.strerror}") from None
    try:
        return RunConfig.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"config is not valid JSON: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None


def format_rows(header, columns):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in zip(*columns):
        w.writerow(["%.17g" % x for x in row])
    return buf.getvalue()


def read_columns(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc.strerror}") from None
    if len(rows) < 2:
        raise CliError(EXIT_IO, f"{path} has no data rows")
    header = rows[0]
    try:
        data = np.array([[float(x) for x in row] for row in rows[1:]])
    except ValueError as exc:
        raise CliError(EXIT_IO, f"{path}: {exc}") from None
    return {name: data[:, i] for i, name in enumerate(header)}


def _emit(text, path):
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc.strerror}") from None


def _model(cfg):
    try:
        return cfg.build_model()
    except (ValueError, ArithmeticError) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None


def _solve(cfg, model):
    s = cfg.solver
    try:
        return fixed_point_solve(
            model, MemoryConfig(depth=cfg.memory.depth, perp_mode=cfg.memory.perp_mode),
            GridConfig(dt=cfg.grid.dt, t_max=cfg.grid.t_max, ratio=cfg.grid.ratio),
            tol=s.tol, max_iter=s.max_iter, mixing=s.mixing, damping=s.damping)
    except AssumptionError as exc:
        sys.stdout.write(exc.report.summary() + "\n")
        failing = ", ".join(exc.report.failing) or "A5"
        raise CliError(EXIT_ASSUMPTION,
                       f"assumption check failed: {failing} (A5 margin {exc.report.a5_margin:.6g})") from None


def _motion_from_csv(path, V_inf):
    cols = read_columns(path)
    if "t" not in cols or "gap" not in cols:
        raise CliError(EXIT_IO, f"{path} needs columns t and gap")
    return MotionGrid(cols["t"], cols["gap"], V_inf)


def cmd_check_kernel(cfg, args):
    model = _model(cfg)
    if not model.gamma > 0:
        raise CliError(EXIT_CONFIG, "check-kernel needs gamma > 0")
    rep = check_assumptions(model.kernel, model.a0, model.alpha, model.gamma, model.V0, model.V_inf)
    print(rep.summary())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["check", "value", "pass"])
    w.writerow(["A1", "nan", int(rep.a1_product_form)])
    w.writerow(["A2", "%.17g" % rep.a2_sup, int(rep.a2_pass)])
    w.writerow(["A3", "%.17g" % rep.a3.p_fit, int(rep.a3_pass)])
    w.writerow(["A4", "%.17g" % rep.a4_sup, int(rep.a4_pass)])
    w.writerow(["A5", "%.17g" % rep.a5_margin, int(rep.a5_margin > 0)])
    path = args.out or cfg.output.get("check")
    if path:
        _emit(buf.getvalue(), path)
    if not rep.overall:
        failing = ", ".join(rep.failing) or "A5"
        raise CliError(EXIT_ASSUMPTION, f"assumption check failed: {failing} (A5 margin {rep.a5_margin:.6g})")
    return EXIT_OK


def cmd_equilibrium(cfg, args):
    model = _model(cfg)
    if cfg.V_inf is not None:
        print("E=%.17g" % model.E)
    else:
        print("V_inf=%.17g" % model.V_inf)
    return EXIT_OK


def cmd_solve(cfg, args):
    model = _model(cfg)
    res = _solve(cfg, model)
    t = res.motion.times
    gap = res.motion.gap
    if res.envelope is not None:
        g_env = model.gamma * res.envelope.g(t)
        h_env = model.gamma * res.envelope.h(t)
    else:
        g_env = h_env = np.full(t.size, math.nan)
    text = format_rows(["t", "V", "gap", "R", "g_env", "h_env"],
                       [t, model.V_inf - gap, gap, res.R_curve, g_env, h_env])
    _emit(text, args.out or cfg.output.get("solve"))
    if not res.converged:
        raise CliError(EXIT_CONVERGENCE, f"no convergence after {res.iterations} iterations "
                                         f"(residual {res.residual_history[-1]:.3g})")
    return EXIT_OK


def cmd_simulate(cfg, args):
    if cfg.mc is None:
        raise CliError(EXIT_CONFIG, "simulate needs an mc block")
    model = _model(cfg)
    block = cfg.mc
    coupling = mc.Coupling(block.coupling)
    prescribed = None
    if coupling is mc.Coupling.PRESCRIBED:
        if args.motion:
            prescribed = _motion_from_csv(args.motion, model.V_inf)
        else:
            res = _solve(cfg, model)
            if not res.converged:
                raise CliError(EXIT_CONVERGENCE, "prescribed motion did not converge")
            prescribed = res.motion
        times = prescribed.times
    else:
        times = GridConfig(dt=cfg.grid.dt, t_max=cfg.grid.t_max, ratio=cfg.grid.ratio).build(0.5)
    try:
        mcfg = mc.McConfig.for_model(
            model, n_particles=block.n_particles, seed=cfg.seed, t_max=float(times[-1]),
            output_times=times, coupling=coupling, max_generations=block.max_generations,
            threads=args.threads, batch_size=block.batch_size, lateral_samples=block.lateral_samples)
        out = mc.run(model, mcfg, prescribed)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    _emit(out.to_csv(), args.out or cfg.output.get("simulate"))
    sys.stderr.write("lateral impulse %.6g +- %.6g\n" % (out.lateral_impulse, out.sigma_lateral))
    return EXIT_OK


def cmd_fit(cfg, args):
    cols = read_columns(args.input)
    if "t" not in cols or args.column not in cols:
        raise CliError(EXIT_IO, f"{args.input} needs columns t and {args.column}")
    t = cols["t"]
    lo = args.t_lo if args.t_lo is not None else t[-1] / 20.0
    hi = args.t_hi if args.t_hi is not None else 0.8 * t[-1]
    try:
        fit = fit_tail_exponent(t, cols[args.column], (lo, hi))
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    print("exponent=%.17g stderr=%.17g amplitude=%.17g rms=%.17g n=%d window=[%.17g, %.17g]"
          % (fit.exponent, fit.stderr_exponent, fit.amplitude, fit.rms_residual, fit.n_samples, lo, hi))
    return EXIT_OK


def cmd_verify(cfg, args):
    model = _model(cfg)
    if args.input:
        motion = _motion_from_csv(args.input, model.V_inf)
        B0, Binf = model.stiffness_bounds()
    else:
        res = _solve(cfg, model)
        if not res.converged:
            raise CliError(EXIT_CONVERGENCE, "solve did not converge")
        motion, B0, Binf = res.motion, res.B0, res.Binf
    rep = verify_curve(motion, model.gamma, model.p, model.d, B0, Binf)
    print(rep.to_text())
    path = args.out or cfg.output.get("verify")
    if path:
        _emit(rep.to_csv(), path)
    if not rep.passed:
        bad = [c.name for c in rep.conditions if not c.passed and not c.advisory]
        raise CliError(EXIT_ASSUMPTION, "verification failed: " + ", ".join(bad))
    return EXIT_OK


COMMANDS = {
    "check-kernel": cmd_check_kernel,
    "equilibrium": cmd_equilibrium,
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "verify": cmd_verify,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="gasbody", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--dump-config", action="store_true", help="print the parsed config and exit")
        p.add_argument("--threads", type=int, default=1, help="worker cap for parallel sections")
        p.add_argument("--out", help="output path ('-' for stdout)")
        if name in ("fit", "verify"):
            p.add_argument("--input", required=name == "fit", help="CSV with a t column")
        if name == "fit":
            p.add_argument("--column", default="gap")
            p.add_argument("--t-lo", type=float)
            p.add_argument("--t-hi", type=float)
        if name == "simulate":
            p.add_argument("--motion", help="solve CSV to use as the prescribed motion")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        if args.threads < 1:
            raise CliError(EXIT_CONFIG, "--threads must be at least 1")
        if args.config:
            cfg = load_config(args.config)
        elif args.command == "fit" and not args.dump_config:
            cfg = None
        else:
            raise CliError(EXIT_CONFIG, f"{args.command} needs --config")
        if args.dump_config:
            print(cfg.dumps())
            return EXIT_OK
        return COMMANDS[args.command](cfg, args)
    except CliError as exc:
        sys.stderr.write(f"E{exc.code}: {exc}\n")
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
