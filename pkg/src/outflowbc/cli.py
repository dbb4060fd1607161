"""Command-line front end: calibrate, forward, transient, lumped, synthesize, report, mesh-info.

Exit codes: 0 success, 2 invalid input, 3 solver failure. Errors are also
written to stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

METHODS = ("ocp", "ocp-inlet", "murray", "ohm", "ohm-opt")
COMMANDS = ("calibrate", "forward", "transient", "lumped", "synthesize", "report", "mesh-info")
EXIT_OK, EXIT_INVALID, EXIT_SOLVER = 0, 2, 3
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


@dataclass
class RunConfig:
    command: str = ""
    mesh: str | None = None  # None: bundled 2D arch
    tags: str | None = None
    measurements: str | None = None
    method: str = "ocp"
    out: str = "run"
    dt: float | None = None  # None: 0.5 ms (transient), T/1000 (lumped)
    cycles: int = 5
    model: str = "stokes"
    threads: int = 1
    seed: int = 0
    viscosity: float = 0.04
    rtol: float = 1e-9
    max_iter: int = 50
    R0: str = "ohm"
    consistency: str = "unscaled"
    R: list | None = None
    pressure_tag: int | None = None
    weight_inlet: float | None = None
    source: str = "forward"
    noise: float = 0.0
    Q: float | None = None
    period: float = 1.0
    waveform: str | None = None
    result: str | None = None
    evaluate: bool = False
    inputs: list = field(default_factory=list)

    def validate(self) -> None:
        from .measurements import MeasurementError
        if self.method not in METHODS:
            raise MeasurementError(f"unknown method {self.method!r}; choose from {METHODS}", "method")
        if self.model not in ("stokes", "navier-stokes"):
            raise MeasurementError(f"unknown model {self.model!r}", "model")
        if self.source not in ("forward", "lumped"):
            raise MeasurementError(f"unknown source {self.source!r}", "from")
        for name in ("rtol", "viscosity", "period"):
            if not getattr(self, name) > 0:
                raise MeasurementError("must be positive", name)
        if self.dt is not None and not self.dt > 0:
            raise MeasurementError("must be positive", "dt")
        if self.cycles < 1 or self.threads < 1 or self.max_iter < 1:
            raise MeasurementError("cycles, threads and max_iter must be >= 1", "cycles")
        if self.noise < 0:
            raise MeasurementError("must be >= 0", "noise")
        for name in ("mesh", "tags", "measurements", "waveform", "result"):
            p = getattr(self, name)
            if p is not None and not Path(p).is_file():
                raise MeasurementError(f"file not found: {p}", name)
        for p in self.inputs:
            if not Path(p).is_file():
                raise MeasurementError(f"file not found: {p}", "inputs")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    a = common.add_argument
    a("--config", help="JSON file with RunConfig fields (flags take precedence)")
    a("--mesh", help="MSH 2.2 ASCII mesh (default: bundled 2D arch)")
    a("--tags", help="tag map JSON {inlet, walls, outlets}")
    a("--measurements", help="measurement JSON")
    a("--method", choices=METHODS)
    a("--out", help="output directory")
    a("--dt", type=float)
    a("--cycles", type=int)
    a("--model", choices=("stokes", "navier-stokes"))
    a("--threads", type=int)
    a("--seed", type=int)
    a("--viscosity", type=float)
    a("--rtol", type=float)
    a("--max-iter", dest="max_iter", type=int)
    a("--R0", choices=("ohm", "murray"))
    a("--consistency", choices=("unscaled", "viscous", "none"))
    a("--R", type=lambda s: [float(x) for x in s.split(",")], help="comma-separated outlet resistances")
    a("--pressure-tag", dest="pressure_tag", type=int)
    a("--weight-inlet", dest="weight_inlet", type=float)
    a("--from", dest="source", choices=("forward", "lumped"))
    a("--noise", type=float, help="relative Gaussian noise on synthesized data")
    a("--Q", type=float, help="mean inlet flow (cm^3/s) when no measurements are given")
    a("--period", type=float)
    a("--waveform", help="inlet waveform CSV with header t_s,Q_cm3_s")
    a("--result", help="calibration result.json supplying R")
    a("--evaluate", action="store_const", const=True, default=None,
      help="also run the steady model at baseline resistances")
    a("--print-config", action="store_true", help="print the resolved configuration and exit")
    ap = argparse.ArgumentParser(prog="outflowbc", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}")
    for c in COMMANDS:
        p = sub.add_parser(c, parents=[common])
        if c == "report":
            p.add_argument("inputs", nargs="+", help="result.json files")
    return ap


def resolve_config(argv) -> tuple[RunConfig, bool]:
    """Defaults, then the config file, then explicit flags."""
    ns = vars(_parser().parse_args(argv))
    cfg = RunConfig().to_dict()
    if ns.get("config"):
        try:
            extra = json.loads(Path(ns["config"]).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            from .measurements import MeasurementError
            raise MeasurementError(f"cannot read config file: {exc}", "config") from None
        unknown = set(extra) - set(cfg)
        if unknown:
            from .measurements import MeasurementError
            raise MeasurementError(f"unknown keys {sorted(unknown)}", "config")
        cfg.update(extra)
    for k, v in ns.items():
        if k in cfg and v is not None and k != "inputs":
            cfg[k] = v
    if ns.get("inputs"):
        cfg["inputs"] = ns["inputs"]
    cfg["command"] = ns["command"]
    return RunConfig(**cfg), bool(ns.get("print_config"))


# ---------------------------------------------------------------------------
# helpers


def _data_path(name: str) -> Path:
    return Path(str(resources.files("outflowbc") / "data" / name))


def _load_mesh(cfg: RunConfig):
    from .mesh import TagMap, parse_mesh
    mesh_path = Path(cfg.mesh) if cfg.mesh else _data_path("arch.msh")
    tags_path = Path(cfg.tags) if cfg.tags else (_data_path("arch_tags.json") if not cfg.mesh else None)
    if tags_path is None:
        from .mesh import MeshError
        raise MeshError("--tags is required with a custom --mesh")
    return parse_mesh(mesh_path, TagMap.load(tags_path))


def _load_ms(cfg: RunConfig, mesh=None, required=True):
    from dataclasses import replace

    from .measurements import MeasurementError, load_measurements
    if cfg.measurements is None:
        if required:
            raise MeasurementError("--measurements is required", "measurements")
        return None
    ms = load_measurements(cfg.measurements, mesh.tag_map if mesh is not None else None)
    if cfg.pressure_tag is not None:
        ms = replace(ms, pressure_patch_tag=cfg.pressure_tag)
        if mesh is not None:
            ms.check_tags(mesh.tag_map)
    if cfg.weight_inlet is not None:
        ms = ms.with_weights(inlet=cfg.weight_inlet)
    return ms


def _resistances(cfg: RunConfig, n: int):
    import numpy as np

    from .measurements import MeasurementError
    if cfg.R is not None:
        R = np.asarray(cfg.R, float)
    elif cfg.result is not None:
        d = json.loads(Path(cfg.result).read_text())
        R = np.asarray(list(d["R"].values()), float)
    else:
        raise MeasurementError("give --R or --result", "R")
    if R.shape != (n,) or not np.all(R > 0):
        raise MeasurementError(f"need {n} positive resistances, got {R.tolist()}", "R")
    return R


def _props(cfg: RunConfig):
    from .fem import FluidProps
    return FluidProps(viscosity=cfg.viscosity)


def _inlet_waveform(cfg: RunConfig, ms):
    from .lumped import InletWaveform
    from .measurements import MeasurementError
    if cfg.waveform:
        return InletWaveform.from_csv(cfg.waveform)
    q = cfg.Q if cfg.Q is not None else (ms.inlet_flow if ms is not None else None)
    if q is None:
        raise MeasurementError("give --Q, --waveform or --measurements", "Q")
    return InletWaveform.template(q, period=cfg.period)


def _circuit_errors(R, ms) -> dict:
    """Percent deviations of the all-parallel resistor circuit driven by ``Q_in``."""
    import numpy as np

    from .baselines import parallel_resistance
    p = parallel_resistance(R) * ms.inlet_flow
    err = {"pressure": 100 * (p - ms.target_pressure) / ms.target_pressure}
    for t, r, q in zip(ms.outlet_tags, R, ms.outlet_flows):
        err[str(t)] = 100 * (p / r - q) / q
    return {"flows": {str(t): float(p / r) for t, r in zip(ms.outlet_tags, np.asarray(R))},
            "mean_pressure": float(p), "errors_vs_measurements_percent": err}


def _steady_errors(spaces, R, ms, props, consistency) -> dict:
    from .fem import forward_solve, mass_balance
    st = forward_solve(spaces, R, ms.inlet_flow, props, consistency=consistency)
    p = st.mean_pressure(ms.pressure_tag)
    err = {"pressure": 100 * (p - ms.target_pressure) / ms.target_pressure}
    flows = {}
    for t, q in zip(ms.outlet_tags, ms.outlet_flows):
        flows[str(t)] = st.flow(t)
        err[str(t)] = 100 * (flows[str(t)] - q) / q
    return {"flows": flows, "mean_pressure": p, "errors_vs_measurements_percent": err,
            "mass_balance": mass_balance(st)}


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, default=_jsonable) + "\n")


def _jsonable(o):
    import numpy as np
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# commands


def cmd_calibrate(cfg: RunConfig, out: Path) -> dict:
    from .baselines import SimplexOptions, murray_resistances, ohm_optimized, ohm_resistances
    from .ocp import OCPConfig, solve_ocp
    t0 = time.perf_counter()
    needs_mesh = cfg.method in ("ocp", "ocp-inlet", "murray") or cfg.evaluate
    mesh = _load_mesh(cfg) if needs_mesh else None
    ms = _load_ms(cfg, mesh)
    if cfg.method in ("ocp", "ocp-inlet"):
        oc = OCPConfig(mode="outlets" if cfg.method == "ocp" else "outlets+inlet", R0=cfg.R0, rtol=cfg.rtol,
                       max_iter=cfg.max_iter, consistency=cfg.consistency)
        res = solve_ocp(mesh, ms, oc, _props(cfg))
        d = res.to_dict()
        d["method"] = cfg.method
        d["model"] = "steady-stokes"
    else:
        extra = {}
        if cfg.method == "ohm":
            R = ohm_resistances(ms.target_pressure, ms.outlet_flows)
        elif cfg.method == "ohm-opt":
            fit = ohm_optimized(ms, SimplexOptions())
            R = fit.R
            extra = {"J": fit.J, "J_start": fit.J_start, "evals": fit.simplex.evals,
                     "converged": fit.simplex.converged}
        else:
            from .mesh import outlet_areas
            R = murray_resistances(outlet_areas(mesh), ms.target_pressure, ms.inlet_flow)
        d = {"method": cfg.method, "R": {str(t): float(r) for t, r in zip(ms.outlet_tags, R)}, **extra}
        if cfg.evaluate:
            from .fem import build_spaces
            d.update(_steady_errors(build_spaces(mesh), R, ms, _props(cfg), cfg.consistency), model="steady-stokes")
        else:
            d.update(_circuit_errors(R, ms), model="0d-parallel")
    d["label"] = Path(cfg.measurements).stem
    d["measured"] = {"pressure": ms.target_pressure, "inlet": ms.inlet_flow,
                     **{str(t): q for t, q in zip(ms.outlet_tags, ms.outlet_flows)}}
    d["seconds"] = time.perf_counter() - t0
    _write_json(out / "result.json", d)
    return d


def cmd_forward(cfg: RunConfig, out: Path) -> dict:
    from .fem import build_spaces, export_fields_csv, forward_solve, mass_balance, outlet_summary
    mesh = _load_mesh(cfg)
    ms = _load_ms(cfg, mesh, required=False)
    spaces = build_spaces(mesh)
    R = _resistances(cfg, spaces.n_out)
    q = cfg.Q if cfg.Q is not None else (ms.inlet_flow if ms else None)
    if q is None:
        from .measurements import MeasurementError
        raise MeasurementError("give --Q or --measurements", "Q")
    st = forward_solve(spaces, R, q, _props(cfg), consistency=cfg.consistency)
    d = {"R": {str(t): float(r) for t, r in zip(spaces.outlet_tags, R)}, "Q_in": q,
         "outlets": {str(k): v for k, v in outlet_summary(st).items()},
         "inlet_mean_pressure": st.mean_pressure(spaces.inlet_tag),
         "mass_balance": mass_balance(st), "solver_residual": st.residual}
    if ms is not None:
        d.update({"vs_measurements": _steady_errors(spaces, R, ms, _props(cfg), cfg.consistency)})
    export_fields_csv(st, out / "fields.csv")
    _write_json(out / "result.json", d)
    return d


def cmd_transient(cfg: RunConfig, out: Path) -> dict:
    import numpy as np

    from .fem import build_spaces
    from .lumped import split_rcr
    from .transient import TransientConfig, solve_unsteady, tawss_osi, wall_shear_series
    mesh = _load_mesh(cfg)
    ms = _load_ms(cfg, mesh, required=False)
    spaces = build_spaces(mesh)
    R = _resistances(cfg, spaces.n_out)
    wf = _inlet_waveform(cfg, ms)
    dt = cfg.dt if cfg.dt is not None else TransientConfig.dt
    areas = [spaces.patch(t).area for t in spaces.outlet_tags]
    tc = TransientConfig(model=cfg.model, dt=dt, n_cycles=cfg.cycles)
    res = solve_unsteady(spaces, split_rcr(R, areas), wf, tc, _props(cfg))
    res.to_csv(out / "waveforms")
    ind = tawss_osi(wall_shear_series(res), wf.period)
    ind.to_csv(out / "indicators.csv")
    cm = res.cycle_means()
    d = {"model": cfg.model, "dt": dt, "cycles": cfg.cycles, "R": {str(t): float(r) for t, r in
                                                                 zip(spaces.outlet_tags, R)},
         "last_cycle": cm, "max_mass_balance": float(np.max(res.mass_balance)),
         "tawss_range": [float(ind.tawss.min()), float(ind.tawss.max())],
         "osi_range": [float(ind.osi.min()), float(ind.osi.max())]}
    if ms is not None:
        d["deviation_percent"] = {str(t): 100 * (qm - q) / q for t, qm, q in
                                  zip(ms.outlet_tags, cm["Q"], ms.outlet_flows)}
    _write_json(out / "result.json", d)
    return d


def cmd_lumped(cfg: RunConfig, out: Path) -> dict:
    from .lumped import simulate_network, split_rcr, summary_json
    from .mesh import outlet_areas
    mesh = _load_mesh(cfg)
    ms = _load_ms(cfg, mesh, required=False)
    R = _resistances(cfg, len(mesh.outlet_tags))
    wf = _inlet_waveform(cfg, ms)
    params = split_rcr(R, outlet_areas(mesh))
    w = simulate_network(params, wf, n_cycles=cfg.cycles, dt=cfg.dt)
    w.to_csv(out / "waveforms", names=[f"outlet_{t}" for t in mesh.outlet_tags])
    d = summary_json(w, params)
    d["dt"] = w.dt
    _write_json(out / "result.json", d)
    return d


def cmd_synthesize(cfg: RunConfig, out: Path) -> dict:
    import numpy as np

    from .measurements import MMHG, MeasurementSet, save_measurements
    mesh = _load_mesh(cfg)
    tm = mesh.tag_map
    R = _resistances(cfg, len(tm.outlets))
    q_in = cfg.Q if cfg.Q is not None else 119.1
    ptag = cfg.pressure_tag if cfg.pressure_tag is not None else tm.inlet
    if cfg.source == "forward":
        from .fem import build_spaces, forward_solve
        spaces = build_spaces(mesh)
        st = forward_solve(spaces, R, q_in, _props(cfg), consistency=cfg.consistency)
        flows = np.array([st.flow(t) for t in tm.outlets])
        p = st.mean_pressure(ptag)
    else:
        from .lumped import InletWaveform, cycle_averages, simulate_network, split_rcr
        from .mesh import outlet_areas
        wf = InletWaveform.template(q_in, period=cfg.period)
        w = simulate_network(split_rcr(R, outlet_areas(mesh)), wf, n_cycles=cfg.cycles, dt=cfg.dt, p_c0="periodic")
        avg = cycle_averages(w)
        flows, p = np.asarray(avg["Q"]), avg["p"]
    rng = np.random.default_rng(cfg.seed)
    if cfg.noise > 0:
        flows = flows * (1 + cfg.noise * rng.standard_normal(flows.shape))
        p = p * (1 + cfg.noise * rng.standard_normal())
    ms = MeasurementSet(inlet_flow=q_in, outlet_flows=tuple(flows), outlet_tags=tm.outlets,
                        target_pressure=float(p), inlet_tag=tm.inlet,
                        pressure_patch_tag=None if ptag == tm.inlet else ptag,
                        pressure_input={"mean_mmHg": float(p) / MMHG})
    out.mkdir(parents=True, exist_ok=True)
    save_measurements(ms, out / "measurements.json")
    d = {"source": cfg.source, "R": {str(t): float(r) for t, r in zip(tm.outlets, R)}, "noise": cfg.noise,
         "seed": cfg.seed, "measurements": ms.to_dict()}
    _write_json(out / "result.json", d)
    return d


def build_report(results: list[dict]) -> tuple[list[list], list[list]]:
    """Comparison table (one row per result) and long-format error histogram rows."""
    tags = []
    for r in results:
        for t in r.get("R", {}):
            if t not in tags:
                tags.append(t)
    header = ["label", "method", "model", *[f"R_{t}" for t in tags], *[f"Q_{t}" for t in tags],
              "mean_pressure_mmHg", *[f"err_{t}_percent" for t in tags], "err_pressure_percent"]
    table = [header]
    hist = [["label", "method", "quantity", "error_percent"]]
    for r in results:
        err = r.get("errors_vs_measurements_percent", {})
        flows = r.get("flows", {})
        p = r.get("mean_pressure")
        row = [r.get("label", ""), r.get("method", ""), r.get("model", "")]
        row += [r["R"].get(t, "") for t in tags]
        row += [flows.get(t, "") for t in tags]
        row += [p / 1333.22 if p is not None else ""]
        row += [err.get(t, "") for t in tags] + [err.get("pressure", "")]
        table.append(row)
        for k in [*tags, "pressure"]:
            if k in err:
                hist.append([r.get("label", ""), r.get("method", ""), k, err[k]])
    return table, hist


def cmd_report(cfg: RunConfig, out: Path) -> dict:
    import csv
    results = [json.loads(Path(p).read_text()) for p in cfg.inputs]
    table, hist = build_report(results)
    out.mkdir(parents=True, exist_ok=True)
    for name, rows in (("comparison.csv", table), ("histogram.csv", hist)):
        with open(out / name, "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
    d = {"n_results": len(results), "columns": table[0]}
    _write_json(out / "result.json", d)
    return d


def cmd_mesh_info(cfg: RunConfig, out: Path) -> dict:
    from .fem import build_spaces
    from .mesh import validate_mesh
    mesh = _load_mesh(cfg)
    d = validate_mesh(mesh).to_dict()
    d["discretization"] = build_spaces(mesh).summary()
    d["tag_map"] = mesh.tag_map.to_dict()
    _write_json(out / "result.json", d)
    print(json.dumps(d, indent=2, default=_jsonable))
    return d


COMMAND_FUNCS = {"calibrate": cmd_calibrate, "forward": cmd_forward, "transient": cmd_transient,
                 "lumped": cmd_lumped, "synthesize": cmd_synthesize, "report": cmd_report,
                 "mesh-info": cmd_mesh_info}


def _manifest(cfg: RunConfig, argv, seconds: float) -> dict:
    import numpy
    import scipy
    import shapely
    conf = cfg.to_dict()
    inputs = {}
    for name in ("mesh", "tags", "measurements", "waveform", "result"):
        if conf[name]:
            inputs[name] = {"path": str(Path(conf[name]).resolve()), "sha256": _sha256(conf[name])}
    for i, p in enumerate(cfg.inputs):
        inputs[f"inputs[{i}]"] = {"path": str(Path(p).resolve()), "sha256": _sha256(p)}
    return {
        "argv": list(argv),
        "config": conf,
        "config_sha256": hashlib.sha256(json.dumps(conf, sort_keys=True).encode()).hexdigest(),
        "inputs": inputs,
        "versions": {"python": platform.python_version(), "numpy": numpy.__version__, "scipy": scipy.__version__,
                     "shapely": shapely.__version__, "outflowbc": _package_version()},
        "timings": {"total_seconds": seconds},
    }


def _package_version() -> str:
    from importlib.metadata import PackageNotFoundError, version
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


def _fail(code: int, exc: BaseException) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if getattr(exc, "field", None):
        err["field"] = exc.field
    if getattr(exc, "line", None) is not None:
        err["line"] = exc.line
    print(json.dumps(err), file=sys.stderr)
    return code


def run_command(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        cfg, show = resolve_config(argv)
    except SystemExit as exc:  # argparse usage errors
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    except ValueError as exc:
        return _fail(EXIT_INVALID, exc)
    for v in _THREAD_VARS:
        os.environ[v] = str(cfg.threads)  # effective before numpy loads BLAS
    from .fem import SolverError
    from .ocp import ConvergenceError
    if show:
        print(json.dumps(cfg.to_dict(), indent=2))
        return EXIT_OK
    out = Path(cfg.out)
    t0 = time.perf_counter()
    try:
        cfg.validate()
        COMMAND_FUNCS[cfg.command](cfg, out)
    except (ConvergenceError, SolverError, FloatingPointError) as exc:
        return _fail(EXIT_SOLVER, exc)
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        return _fail(EXIT_INVALID, exc)
    _write_json(out / "manifest.json", _manifest(cfg, argv, time.perf_counter() - t0))
    return EXIT_OK


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
