"""Regenerate the bundled 2D arch mesh, its tag map and the four case files."""
import argparse
import json
from pathlib import Path

from outflowbc.geometry import ARCH_OUTLETS, arch_mesh
from outflowbc.mesh import validate_mesh, write_msh

DATA = Path(__file__).resolve().parents[1] / "src" / "outflowbc" / "data"

# mean pressure (mmHg), inlet flow corrected for the coronaries, outlet flows
# BCA, LCC, LSUB, DAo (cm^3/s)
CASES = {
    "case1": (98.7, 119.10, (15.9, 5.98, 8.48, 73.1)),
    "case2": (105.0, 107.00, (13.2, 6.71, 7.47, 79.8)),
    "case3": (103.0, 125.63, (19.0, 11.3, 10.5, 84.8)),
    "case4": (100.0, 103.00, (9.87, 4.32, 6.92, 69.1)),
}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--h", type=float, default=0.3, help="target edge length (cm)")
    ap.add_argument("--out", type=Path, default=DATA)
    args = ap.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)
    mesh = arch_mesh(h=args.h)
    write_msh(mesh, args.out / "arch.msh")
    tags = mesh.tag_map.to_dict() | {"names": dict(zip(map(str, mesh.tag_map.outlets), ARCH_OUTLETS))}
    (args.out / "arch_tags.json").write_text(json.dumps(tags, indent=2) + "\n")
    for name, (p, q_in, q) in CASES.items():
        d = {"pressure": {"mean_mmHg": p},
             "inlet": {"tag": 1, "flow_cm3_s": q_in, "apply_coronary_correction": False},
             "outlets": [{"tag": t, "flow_cm3_s": f} for t, f in zip(mesh.tag_map.outlets, q)]}
        (args.out / f"{name}.json").write_text(json.dumps(d, indent=2) + "\n")
    print(json.dumps(validate_mesh(mesh).to_dict(), indent=2))


if __name__ == "__main__":
    main()
