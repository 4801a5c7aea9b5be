"""Fixed-point residual histories and depth truncation error across initial gaps.

    python3 scripts/depth_sweep.py --gammas 0.02 0.05 0.1 --t-max 400
"""
import argparse

import numpy as np

from gasbody.dynamics import GridConfig, fixed_point_solve
from gasbody.force import ForceModel
from gasbody.kernel import InitialDensity, make_kernel
from gasbody.memory import MemoryConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--gammas", type=float, nargs="+", default=[0.02, 0.05, 0.1])
    ap.add_argument("--t-max", type=float, default=400.0)
    ap.add_argument("--beta", type=float, default=1.0)
    args = ap.parse_args()

    kern, a0 = make_kernel("GaussFlux", {"beta": args.beta}), InitialDensity.gaussian(args.beta)
    grid = GridConfig(0.02, args.t_max, 1.05)
    for gamma in args.gammas:
        model = ForceModel(kern, a0, 0.0, 1.0, 1.0 - gamma)
        two = fixed_point_solve(model, MemoryConfig(depth=2), grid)
        three = fixed_point_solve(model, MemoryConfig(depth=3), grid, initial=two.motion)
        diff = np.max(np.abs(three.motion.gap - two.motion.gap))
        hist = " ".join(f"{r / gamma:.1e}" for r in two.residual_history)
        print(f"gamma={gamma:g}  residual/gamma: {hist}")
        print(f"    depth 3 vs 2: {diff:.3e}  (10*gamma^(2(p+1)) = {10 * gamma ** (2 * (model.p + 1)):.3e})")


if __name__ == "__main__":
    main()
