import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from outflowbc.lumped import (InletWaveform, WindkesselParams, cycle_averages, simulate_network, split_rcr,
                              summary_json)

R_TRUE = np.array([7000.0, 21000.0, 16000.0, 1700.0])
AREAS = np.array([1.0, 0.6, 0.7, 2.2])


def test_split_constants():
    (w,) = split_rcr([1000.0], [1.0])
    assert (w.R_p, w.R_d, w.C, w.p_distal) == (90.0, 910.0, 0.001, 0.0)
    ws = split_rcr([1.0] * 4, [3.0] * 4)
    assert [w.C for w in ws] == [0.00025] * 4


@given(st.lists(st.tuples(st.floats(10, 1e5), st.floats(0.01, 10)), min_size=1, max_size=6))
def test_split_partitions(pairs):
    R, A = map(np.array, zip(*pairs))
    ws = split_rcr(R, A)
    assert sum(w.C for w in ws) == pytest.approx(0.001, rel=1e-12)
    for w, r in zip(ws, R):
        assert w.R_p + w.R_d == pytest.approx(r, rel=1e-15)


def test_invalid_parameters():
    with pytest.raises(ValueError):
        WindkesselParams(1.0, -1.0, 1e-3)
    with pytest.raises(ValueError):
        WindkesselParams(1.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        simulate_network(split_rcr([1.0], [1.0]), InletWaveform.constant(1.0), dt=0.02)


def test_single_branch_step_response_is_exact_backward_euler():
    (w,) = split_rcr([1000.0], [1.0])
    dt = 1e-3
    out = simulate_network([w], InletWaveform.constant(2.0), n_cycles=3, dt=dt)
    n = np.arange(len(out.t))
    g = 1 + dt / (w.R_d * w.C)
    np.testing.assert_allclose(out.p_c[:, 0], 2.0 * w.R_d * (1 - g ** -n), rtol=1e-12, atol=1e-9)
    assert np.all(np.diff(out.p[1:]) >= -1e-12)
    long = simulate_network([w], InletWaveform.constant(2.0), n_cycles=20, dt=1e-2)
    assert long.p[-1] == pytest.approx(2000.0, rel=1e-6)


def test_flow_conservation_every_step():
    out = simulate_network(split_rcr(R_TRUE, AREAS), InletWaveform.template(119.1), n_cycles=2, dt=1e-3)
    np.testing.assert_allclose(out.Q.sum(axis=1), out.Q0, rtol=1e-12, atol=1e-12)


def test_periodic_start_satisfies_mean_identities():
    ws = split_rcr(R_TRUE, AREAS)
    out = simulate_network(ws, InletWaveform.template(119.1), n_cycles=2, dt=1 / 2000, p_c0="periodic")
    avg = cycle_averages(out)
    np.testing.assert_allclose(np.array(avg["Q"]) * R_TRUE, avg["p"], rtol=1e-9)
    assert avg["p"] == pytest.approx(avg["Q0"] / np.sum(1 / R_TRUE), rel=1e-9)


def test_time_step_halving_changes_means_little():
    ws = split_rcr(R_TRUE, AREAS)
    wf = InletWaveform.template(119.1)
    a = cycle_averages(simulate_network(ws, wf, dt=1 / 1000, p_c0="periodic"))
    b = cycle_averages(simulate_network(ws, wf, dt=1 / 2000, p_c0="periodic"))
    assert abs(a["p"] / b["p"] - 1) <= 1e-3
    np.testing.assert_allclose(a["Q"], b["Q"], rtol=1e-3)


def test_resistive_limit_tracks_inflow():
    ws = split_rcr(R_TRUE, AREAS, C_total=1e-9)
    wf = InletWaveform.template(119.1)
    out = simulate_network(ws, wf, n_cycles=1, dt=1 / 1000)
    Rpar = 1 / np.sum(1 / R_TRUE)
    peak = out.Q0.max() * Rpar
    assert np.max(np.abs(out.p[1:] - out.Q0[1:] * Rpar)) <= 5e-3 * peak


def test_cycle_average_of_sine():
    t = np.linspace(0, 1, 1000, endpoint=False)
    wf = InletWaveform(1.0, t, 5.0 + np.sin(2 * np.pi * t))
    out = simulate_network(split_rcr([100.0], [1.0]), wf, n_cycles=1, dt=1e-3)
    assert cycle_averages(out)["Q0"] == pytest.approx(5.0, abs=1e-6)


def test_template_waveform(tmp_path):
    wf = InletWaveform.template(119.1)
    assert wf.mean() == pytest.approx(119.1, rel=1e-6)
    assert wf(0.5) == 0.0 and wf(0.175) > 0
    wf.to_csv(tmp_path / "w.csv")
    back = InletWaveform.from_csv(tmp_path / "w.csv", period=1.0)
    np.testing.assert_allclose(back(np.linspace(0, 2, 77)), wf(np.linspace(0, 2, 77)))
    (tmp_path / "bad.csv").write_text("time,flow\n0,1\n")
    with pytest.raises(ValueError, match="header"):
        InletWaveform.from_csv(tmp_path / "bad.csv")


@settings(max_examples=10, deadline=None)
@given(st.floats(0.2, 3.0))
def test_waveform_is_periodic(T):
    wf = InletWaveform.template(10.0, period=T, n=200)
    ts = np.linspace(0, T, 13)
    np.testing.assert_allclose(wf(ts + 3 * T), wf(ts), atol=1e-9)


def test_summary_json(tmp_path):
    ws = split_rcr(R_TRUE, AREAS)
    out = simulate_network(ws, InletWaveform.template(119.1), n_cycles=2)
    d = summary_json(out, ws, tmp_path / "s.json")
    assert len(d["cycle_mean_pressures"]) == 2 and (tmp_path / "s.json").exists()
