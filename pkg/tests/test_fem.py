import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from outflowbc.fem import (CONSISTENCY_MODES, FluidProps, assemble_forward, build_spaces, forward_solve,
                           inlet_plug_profile, l2_errors, mass_balance, nodal_dirichlet, p2_basis, solve_forward,
                           stokes_operators)
from outflowbc.geometry import box_channel_mesh, channel_mesh, y_bifurcation_mesh
from outflowbc.manufactured import convergence_study
from outflowbc.quadrature import simplex_rule

NU = 0.04


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 4), st.integers(0, 4))
def test_triangle_rule_exact(a, b):
    if a + b > 4:
        return
    pts, w = simplex_rule(2, 4)
    exact = math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)
    assert np.sum(w * pts[:, 0] ** a * pts[:, 1] ** b) == pytest.approx(exact, rel=1e-12, abs=1e-15)


def test_tet_rule_volume_and_moment():
    pts, w = simplex_rule(3, 4)
    assert w.sum() == pytest.approx(1 / 6)
    assert np.sum(w * pts[:, 0] ** 2 * pts[:, 2] ** 2) == pytest.approx(4 / math.factorial(7))


@pytest.mark.parametrize("d", [2, 3])
def test_p2_basis_nodal_and_partition(d):
    verts = np.eye(d + 1)
    edges = [(i, j) for i in range(d + 1) for j in range(i + 1, d + 1)]
    nodes = np.vstack([verts] + [0.5 * (verts[i] + verts[j]) for i, j in edges])
    N, dN = p2_basis(nodes, d)
    np.testing.assert_allclose(N, np.eye(len(nodes)), atol=1e-14)
    rng = np.random.default_rng(0)
    bary = rng.dirichlet(np.ones(d + 1), size=7)
    N, dN = p2_basis(bary, d)
    np.testing.assert_allclose(N.sum(axis=1), 1.0)
    # derivatives are taken in barycentric coordinates: constant along the simplex
    s = dN.sum(axis=1)
    np.testing.assert_allclose(s - s[:, :1], 0.0, atol=1e-12)


def parabolic(Q, H=1.0):
    return lambda X: np.column_stack([6 * Q * X[:, 1] * (H - X[:, 1]) / H ** 3, 0 * X[:, 0]])


@pytest.mark.parametrize("mode", CONSISTENCY_MODES)
def test_poiseuille_is_reproduced(mode):
    L, H, Q, R = 4.0, 1.0, 1.0, 1000.0
    sp_ = build_spaces(channel_mesh(length=L, height=H, nx=8, ny=2))
    ops = stokes_operators(sp_, FluidProps(NU), consistency=mode)
    st_ = solve_forward(assemble_forward(sp_, FluidProps(NU), [R], nodal_dirichlet(sp_, parabolic(Q)), ops=ops))
    assert st_.lam[0] == pytest.approx(R * Q, rel=1e-12)
    drop = 12 * NU * L * Q / H ** 3
    ev, ep = l2_errors(st_, parabolic(Q), lambda X: R * Q + 12 * NU * Q * (L - X[:, 0]))
    assert ev < 1e-10 and ep < 1e-9
    assert st_.mean_pressure(1) - st_.lam[0] == pytest.approx(drop, rel=1e-9)
    assert st_.mean_pressure(3) == pytest.approx(st_.lam[0], rel=1e-12)


def test_plug_inflow_outlet_pressure(channel):
    st_ = forward_solve(channel, [1000.0], 1.0)
    assert st_.lam[0] == pytest.approx(1000.0, rel=1e-12)
    assert mass_balance(st_) < 1e-12


def test_zero_inflow_gives_zero_state(channel):
    st_ = forward_solve(channel, [1000.0], 0.0)
    assert np.abs(st_.v).max() == 0 and np.abs(st_.p).max() < 1e-12


@settings(max_examples=8, deadline=None)
@given(st.floats(0.1, 200.0), st.floats(100.0, 1e4))
def test_state_is_linear_in_inflow(q, R):
    sp_ = build_spaces(channel_mesh(length=2.0, nx=4, ny=2))
    a = forward_solve(sp_, [R], 1.0)
    b = forward_solve(sp_, [R], q)
    np.testing.assert_allclose(b.v, q * a.v, rtol=1e-9, atol=1e-9 * q)
    assert b.lam[0] == pytest.approx(q * R, rel=1e-10)


def test_symmetric_bifurcation_splits_evenly():
    sp_ = build_spaces(y_bifurcation_mesh(h=0.25))
    st_ = forward_solve(sp_, [500.0, 500.0], 1.0)
    assert st_.flow(3) == pytest.approx(0.5, rel=1e-9)
    np.testing.assert_allclose(st_.lam, 250.0, rtol=1e-6)


def test_arch_plug_flux_and_mass_balance(arch, arch_truth):
    plug = inlet_plug_profile(arch, 119.1)
    v = np.zeros(arch.n_vel)
    v[arch.vel_dofs(plug.nodes).ravel()] = plug.values.T.ravel()
    assert -arch_truth.flow(arch.inlet_tag) == pytest.approx(119.1, rel=1e-12)
    assert mass_balance(arch_truth) < 1e-9
    # resistive law holds at every outlet
    for i, t in enumerate(arch.outlet_tags):
        assert arch_truth.lam[i] == pytest.approx([7000, 21000, 16000, 1700][i] * arch_truth.flow(t), rel=1e-10)


def test_consistency_modes_agree_on_arch(arch):
    R = [7000.0, 21000.0, 16000.0, 1700.0]
    q = [np.array([s.flow(t) for t in arch.outlet_tags]) for s in
         (forward_solve(arch, R, 119.1, consistency=m) for m in CONSISTENCY_MODES)]
    for other in q[1:]:
        np.testing.assert_allclose(other, q[0], rtol=1e-6)


def test_negative_resistance_warns(channel):
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        assemble_forward(channel, FluidProps(), [-5.0], inlet_plug_profile(channel, 1.0))
    assert any("negative" in str(w.message) for w in rec)


def test_taylor_hood_orders_with_traction_outlet():
    res = convergence_study(levels=4, consistency="none")
    assert min(res["order_v"]) >= 2.7
    assert min(res["order_p"]) >= 1.7
    assert max(res["mass_balance"]) <= 1e-9


def test_box_duct_smoke_3d():
    sp_ = build_spaces(box_channel_mesh(nx=3, ny=2, nz=2))
    st_ = forward_solve(sp_, [800.0], 2.0)
    assert mass_balance(st_) < 1e-10
    assert st_.lam[0] == pytest.approx(1600.0, rel=1e-10)
    assert st_.mean_pressure(1) > st_.lam[0]
