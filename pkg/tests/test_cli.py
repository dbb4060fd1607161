import json

import numpy as np
import pytest

from outflowbc.cli import EXIT_INVALID, EXIT_OK, EXIT_SOLVER, _data_path, build_report, resolve_config, run_command

CASE3_TABLE = (7248.0, 12142.0, 13094.0, 1624.0)


def _run(tmp_path, *args, name="out"):
    out = tmp_path / name
    code = run_command([*args, "--out", str(out)])
    return code, out


def test_ohm_case3(tmp_path):
    code, out = _run(tmp_path, "calibrate", "--method", "ohm", "--measurements", str(_data_path("case3.json")))
    assert code == EXIT_OK
    d = json.loads((out / "result.json").read_text())
    R = [d["R"][t] for t in ("3", "4", "5", "6")]
    np.testing.assert_allclose(R, CASE3_TABLE, rtol=5e-3)
    assert d["model"] == "0d-parallel"
    man = json.loads((out / "manifest.json").read_text())
    assert man["inputs"]["measurements"]["sha256"]
    assert man["config"]["method"] == "ohm" and "numpy" in man["versions"]


def test_unknown_subcommand_and_flag(tmp_path, capsys):
    assert run_command(["frobnicate"]) == EXIT_INVALID
    assert run_command(["calibrate", "--method", "magic"]) == EXIT_INVALID


def test_print_config_precedence(tmp_path, capsys):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"cycles": 7, "dt": 0.01, "method": "murray"}))
    assert run_command(["calibrate", "--config", str(conf), "--cycles", "3", "--print-config"]) == EXIT_OK
    shown = json.loads(capsys.readouterr().out)
    assert shown["cycles"] == 3 and shown["dt"] == 0.01 and shown["method"] == "murray"
    cfg, show = resolve_config(["lumped"])
    assert cfg.cycles == 5 and not show


def test_bad_config_key(tmp_path, capsys):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"cylces": 7}))
    assert run_command(["lumped", "--config", str(conf)]) == EXIT_INVALID
    assert json.loads(capsys.readouterr().err)["field"] == "config"


def test_bad_measurements_exit_code(tmp_path, capsys):
    bad = tmp_path / "m.json"
    bad.write_text('{"inlet_flow": -1}')
    code, _ = _run(tmp_path, "calibrate", "--method", "ohm", "--measurements", str(bad))
    assert code == EXIT_INVALID
    err = json.loads(capsys.readouterr().err)
    assert err["exit_code"] == EXIT_INVALID and err["message"]
    code, _ = _run(tmp_path, "calibrate", "--measurements", str(tmp_path / "missing.json"))
    assert code == EXIT_INVALID


def test_iteration_cap_exit_code(tmp_path, capsys):
    code, _ = _run(tmp_path, "calibrate", "--measurements", str(_data_path("case1.json")), "--max-iter", "1")
    assert code == EXIT_SOLVER
    assert json.loads(capsys.readouterr().err)["error"] == "ConvergenceError"


def test_synthesize_then_calibrate(tmp_path):
    R = "7000,21000,16000,1700"
    code, syn = _run(tmp_path, "synthesize", "--R", R, "--pressure-tag", "5", name="syn")
    assert code == EXIT_OK
    code, cal = _run(tmp_path, "calibrate", "--measurements", str(syn / "measurements.json"), name="cal")
    assert code == EXIT_OK
    d = json.loads((cal / "result.json").read_text())
    got = np.array([d["R"][t] for t in ("3", "4", "5", "6")])
    np.testing.assert_allclose(got, [7000, 21000, 16000, 1700], rtol=1e-3)


def test_report_is_pure(tmp_path):
    paths = []
    for c in ("case1", "case2"):
        code, out = _run(tmp_path, "calibrate", "--method", "ohm", "--measurements", str(_data_path(f"{c}.json")),
                         name=c)
        assert code == EXIT_OK
        paths.append(str(out / "result.json"))
    code, a = _run(tmp_path, "report", *paths, name="rep_a")
    code2, b = _run(tmp_path, "report", *paths, name="rep_b")
    assert code == code2 == EXIT_OK
    for f in ("comparison.csv", "histogram.csv"):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    rows = (a / "comparison.csv").read_text().splitlines()
    assert rows[0].startswith("label,method,model") and len(rows) == 3


def test_build_report_columns():
    table, hist = build_report([{"label": "x", "method": "ohm", "R": {"3": 1.0},
                                 "errors_vs_measurements_percent": {"3": 0.5, "pressure": -1.0}}])
    assert table[1][:4] == ["x", "ohm", "", 1.0]
    assert hist[1:] == [["x", "ohm", "3", 0.5], ["x", "ohm", "pressure", -1.0]]


@pytest.mark.filterwarnings("ignore:Courant")
def test_lumped_and_transient_outputs(tmp_path):
    code, out = _run(tmp_path, "lumped", "--R", "7000,21000,16000,1700", "--Q", "100", "--cycles", "2", name="lp")
    assert code == EXIT_OK
    assert json.loads((out / "result.json").read_text())["last_cycle"]["Q0"] == pytest.approx(100, rel=1e-3)
    code, out = _run(tmp_path, "transient", "--R", "7000,21000,16000,1700", "--Q", "100", "--cycles", "1",
                     "--dt", "0.05", name="tr")
    assert code == EXIT_OK
    assert (out / "indicators.csv").is_file() and (out / "manifest.json").is_file()
    assert sorted(p.name for p in (out / "waveforms").iterdir())[0].endswith(".csv")


def test_mesh_info(tmp_path, capsys):
    code, out = _run(tmp_path, "mesh-info", name="mi")
    assert code == EXIT_OK
    d = json.loads((out / "result.json").read_text())
    assert d["tag_map"]["outlets"] == [3, 4, 5, 6] and not d["defects"]
