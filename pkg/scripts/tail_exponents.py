"""Solve the shipped examples to a long horizon and fit their tail exponents.

    python3 scripts/tail_exponents.py --t-max 2000 --out results/
"""
import argparse
import time
from pathlib import Path

from gasbody.analysis import fit_tail_exponent, verify_solution
from gasbody.cli import format_rows, load_config
from gasbody.dynamics import GridConfig, fixed_point_solve
from gasbody.memory import MemoryConfig

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
EXPECTED = {"ex1": 4.0, "ex2": 4.5, "ex3_p0": 3.0}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--t-max", type=float, default=2000.0)
    ap.add_argument("--only", nargs="*", default=sorted(EXPECTED))
    ap.add_argument("--out", type=Path, default=None, help="directory for per-example trajectories")
    args = ap.parse_args()
    T = args.t_max
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)

    print(f"{'example':<8} {'exponent':>9} {'expected':>9} {'iters':>5} {'verify':>6} {'seconds':>8}")
    for name in args.only:
        cfg = load_config(str(CONFIGS / f"{name}.json"))
        start = time.perf_counter()
        res = fixed_point_solve(cfg.build_model(), MemoryConfig(cfg.memory.depth, cfg.memory.perp_mode),
                                GridConfig(cfg.grid.dt, T, cfg.grid.ratio),
                                mixing=cfg.solver.mixing, damping=cfg.solver.damping)
        elapsed = time.perf_counter() - start
        fit = fit_tail_exponent(res.motion.times, res.motion.gap, (T / 20, 0.8 * T))
        ok = verify_solution(res).passed
        print(f"{name:<8} {fit.exponent:9.4f} {EXPECTED[name]:9.2f} {res.iterations:5d} "
              f"{'pass' if ok else 'FAIL':>6} {elapsed:8.1f}")
        if args.out:
            m = res.motion
            (args.out / f"{name}_T{T:g}.csv").write_text(
                format_rows(["t", "gap", "R"], [m.times, m.gap, res.R_curve]))


if __name__ == "__main__":
    main()
