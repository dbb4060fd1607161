"""Recover known outlet resistances from synthetic data on the bundled arch.

Data come from the steady Stokes model itself (pressure on the inlet or on
an outlet section) and from last-cycle means of the RCR network, started
either from zero capacitor pressures or on its periodic orbit.
"""
import argparse
import json
import time

import numpy as np

from outflowbc.fem import build_spaces, forward_solve, stokes_operators
from outflowbc.geometry import arch_mesh
from outflowbc.lumped import InletWaveform, cycle_averages, simulate_network, split_rcr
from outflowbc.measurements import MeasurementSet
from outflowbc.mesh import outlet_areas
from outflowbc.ocp import solve_ocp

R_TRUE = np.array([7000.0, 21000.0, 16000.0, 1700.0])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--h", type=float, default=0.3)
    ap.add_argument("--Q", type=float, default=119.1)
    ap.add_argument("--json", help="write the table here")
    args = ap.parse_args(argv)
    spaces = build_spaces(arch_mesh(h=args.h))
    ops = stokes_operators(spaces)
    tags = spaces.outlet_tags
    truth = forward_solve(spaces, R_TRUE, args.Q, ops=ops)
    sources = {}
    for ptag in (spaces.inlet_tag, 5):
        sources[f"stokes, p on tag {ptag}"] = MeasurementSet(
            args.Q, tuple(truth.flow(t) for t in tags), tags, truth.mean_pressure(ptag), pressure_patch_tag=ptag)
    wk = split_rcr(R_TRUE, outlet_areas(spaces.mesh))
    for init in (None, "periodic"):
        w = simulate_network(wk, InletWaveform.template(args.Q), n_cycles=5, dt=1 / 2000, p_c0=init)
        avg = cycle_averages(w)
        sources[f"rcr network, {init or 'zero'} start"] = MeasurementSet(avg["Q0"], tuple(avg["Q"]), tags, avg["p"])
    rows = []
    for name, ms in sources.items():
        t0 = time.perf_counter()
        res = solve_ocp(spaces, ms, ops=ops)
        err = res.R / R_TRUE - 1
        rows.append({"data": name, "R": res.R.tolist(), "max_rel_err": float(np.abs(err).max()), "J": res.J,
                     "iterations": len(res.trace) - 1, "seconds": time.perf_counter() - t0})
        print(f"{name:28} R = {np.round(res.R).astype(int).tolist()}  max err {100 * np.abs(err).max():7.4f}%  "
              f"J {res.J:.2e}  {len(res.trace) - 1} it")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
