"""Calibrate the four bundled cases with every method and tabulate steady-model errors.

Each calibration runs through the CLI, so every output directory carries a
manifest; the final comparison table is written by ``outflowbc report``.
"""
import argparse
import csv
import json
from pathlib import Path

from outflowbc.cli import _data_path, run_command

METHODS = ("ohm", "ohm-opt", "murray", "ocp")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/patient_baselines"))
    ap.add_argument("--cases", nargs="+", default=["case1", "case2", "case3", "case4"])
    args = ap.parse_args(argv)
    results = []
    for case in args.cases:
        for m in METHODS:
            out = args.out / case / m
            cmd = ["calibrate", "--method", m, "--measurements", str(_data_path(f"{case}.json")), "--out", str(out)]
            if m != "ocp":
                cmd.append("--evaluate")  # judge every method on the same steady Stokes model
            if run_command(cmd) != 0:
                raise SystemExit(f"{case}/{m} failed")
            results.append(str(out / "result.json"))
    if run_command(["report", *results, "--out", str(args.out / "report")]) != 0:
        raise SystemExit("report failed")
    with open(args.out / "report" / "comparison.csv") as fh:
        rows = list(csv.DictReader(fh))
    tags = [k[2:] for k in rows[0] if k.startswith("R_")]
    print(f"{'case':6} {'method':8} " + " ".join(f"{'R_' + t:>9}" for t in tags) + "   errors % (p, outlets)")
    for r in rows:
        errs = [float(r["err_pressure_percent"])] + [float(r[f"err_{t}_percent"]) for t in tags]
        print(f"{r['label']:6} {r['method']:8} " + " ".join(f"{float(r['R_' + t]):9.0f}" for t in tags)
              + "   " + " ".join(f"{e:6.2f}" for e in errs))
    print(json.dumps({"report": str(args.out / "report")}))


if __name__ == "__main__":
    main()
