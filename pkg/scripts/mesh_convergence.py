"""Manufactured-solution orders for each outlet formulation, and calibrated R versus mesh size."""
import argparse

import numpy as np

from outflowbc.fem import build_spaces
from outflowbc.geometry import arch_mesh
from outflowbc.manufactured import convergence_study
from outflowbc.measurements import MMHG, MeasurementSet
from outflowbc.ocp import solve_ocp


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--levels", type=int, default=4)
    ap.add_argument("--h", type=float, nargs="+", default=[0.45, 0.3, 0.22])
    args = ap.parse_args(argv)
    for mode in ("unscaled", "viscous", "none"):
        s = convergence_study(levels=args.levels, consistency=mode)
        ev = " ".join(f"{e:.2e}" for e in s["err_v"])
        ep = " ".join(f"{e:.2e}" for e in s["err_p"])
        print(f"{mode:8} velocity L2 {ev}  orders {np.round(s['order_v'], 2).tolist()}")
        print(f"{'':8} pressure L2 {ep}  orders {np.round(s['order_p'], 2).tolist()}")
    ms = MeasurementSet(119.1, (15.9, 5.98, 8.48, 73.1), (3, 4, 5, 6), 98.7 * MMHG)
    prev = None
    for h in args.h:
        spaces = build_spaces(arch_mesh(h=h))
        res = solve_ocp(spaces, ms)
        change = "" if prev is None else f"  change {100 * np.abs(res.R / prev - 1).max():.3f}%"
        n = spaces.summary()["velocity_dofs"] + spaces.summary()["pressure_dofs"]
        print(f"arch h={h:<5} dofs {n:6d}  R = {np.round(res.R).astype(int).tolist()}{change}")
        prev = res.R


if __name__ == "__main__":
    main()
