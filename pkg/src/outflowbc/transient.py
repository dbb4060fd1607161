"""Unsteady Stokes / Navier-Stokes with RCR outlets, plus wall-shear indicators.

Each backward-Euler step solves the forward saddle-point system with the
mass term ``M/dt`` added, the outlet rows ``lam_i = R_eff,i Q_i + offset_i``
and, for the Navier-Stokes model, the convection linearized around the
previous velocity. Density is one (kinematic form of the momentum equation).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fem import (DiscreteSpaces, Factorization, FluidProps, StokesOperators, apply_dirichlet, build_spaces,
                  dirichlet_values, forward_matrix, inlet_plug_profile, mass_scalar, split_solution,
                  stokes_operators)
from .lumped import InletWaveform, WindkesselParams
from .mesh import Mesh

MODELS = ("stokes", "navier-stokes")


def rcr_step_coefficients(wk: WindkesselParams, dt: float, p_c_prev: float) -> tuple[float, float]:
    """Implicit RCR outlet law ``lam = R_eff Q + p_offset`` for one step."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    g = 1.0 + dt / (wk.R_d * wk.C)
    R_eff = wk.R_p + (dt / wk.C) / g
    p_offset = (p_c_prev + dt * wk.p_distal / (wk.R_d * wk.C)) / g
    return R_eff, p_offset


def capacitor_update(wk: WindkesselParams, dt: float, p_c_prev: float, Q: float) -> float:
    g = 1.0 + dt / (wk.R_d * wk.C)
    return (p_c_prev + dt * Q / wk.C + dt * wk.p_distal / (wk.R_d * wk.C)) / g


@dataclass(frozen=True)
class TransientConfig:
    model: str = "stokes"
    dt: float = 5e-4
    n_cycles: int = 5
    snapshot_every: int = 10
    # with either tangential outlet term the velocity operator is indefinite
    # and backward Euler can grow; plain traction outlets keep it coercive
    consistency: str = "none"
    backflow: bool = True  # outflow stabilization for the Navier-Stokes model
    cfl_warn: float = 1.0

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        if not self.dt > 0 or self.n_cycles < 1 or self.snapshot_every < 1:
            raise ValueError("dt, n_cycles and snapshot_every must be positive")


@dataclass
class TransientResult:
    spaces: DiscreteSpaces
    t: np.ndarray
    Q_in: np.ndarray
    Q: np.ndarray  # (nt, n_out) outlet flows
    P: np.ndarray  # (nt, n_out) outlet pressures (multipliers)
    p_c: np.ndarray  # (nt, n_out)
    snapshot_steps: np.ndarray
    snapshots: np.ndarray  # (ns, n_vel)
    props: FluidProps
    period: float
    dt: float
    model: str
    mass_balance: np.ndarray = field(default=None)

    @property
    def steps_per_cycle(self) -> int:
        return int(round(self.period / self.dt))

    def cycle_slice(self, cycle: int = -1) -> slice:
        m = self.steps_per_cycle
        n = (len(self.t) - 1) // m
        c = cycle % n
        return slice(c * m, (c + 1) * m + 1)

    def cycle_means(self, cycle: int = -1) -> dict:
        sl = self.cycle_slice(cycle)
        tt = self.t[sl]
        T = tt[-1] - tt[0]

        def mean(y):
            return np.trapezoid(y[sl], tt, axis=0) / T

        return {"Q": mean(self.Q).tolist(), "P": mean(self.P).tolist(), "p_c": mean(self.p_c).tolist(),
                "Q_in": float(mean(self.Q_in))}

    def last_cycle_snapshots(self):
        sl = self.cycle_slice(-1)
        keep = (self.snapshot_steps >= sl.start) & (self.snapshot_steps <= sl.stop - 1)
        return self.t[self.snapshot_steps[keep]], self.snapshots[keep]

    def to_csv(self, outdir, names=None) -> None:
        from pathlib import Path
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        names = names or [str(t) for t in self.spaces.outlet_tags]
        for i, nm in enumerate(names):
            np.savetxt(outdir / f"outlet_{nm}.csv", np.column_stack([self.t, self.P[:, i], self.Q[:, i]]),
                       delimiter=",", header="t_s,p_dyn_cm2,Q_cm3_s", comments="", fmt="%.12g")
        np.savetxt(outdir / "inlet.csv", np.column_stack([self.t, self.Q_in]), delimiter=",",
                   header="t_s,Q_cm3_s", comments="", fmt="%.12g")


# ---------------------------------------------------------------------------
# convection


def convection_matrix(spaces: DiscreteSpaces, v: np.ndarray, backflow: bool = True) -> sp.csr_matrix:
    """Skew-symmetric linearized convection around ``v`` (all components).

    ``int (beta . grad u) . w + 1/2 (div beta) u . w`` plus, if requested,
    ``-1/2 int_outlets min(beta . n, 0) u . w`` to damp backflow.
    """
    cq = spaces.cell_quad
    d = spaces.dim
    vel = v.reshape(d, -1).T[spaces.cell_nodes]  # (nc, nloc, d)
    beta = np.einsum("qa,cax->cqx", cq.N, vel)
    div = np.einsum("cqax,cax->cq", cq.grad, vel)
    Ce = np.einsum("cq,qa,cqx,cqbx->cab", cq.weights, cq.N, beta, cq.grad)
    Ce += 0.5 * np.einsum("cq,cq,qa,qb->cab", cq.weights, div, cq.N, cq.N)
    cn = spaces.cell_nodes
    nloc = cn.shape[1]
    rows = [np.repeat(cn[:, :, None], nloc, 2).ravel()]
    cols = [np.repeat(cn[:, None, :], nloc, 1).ravel()]
    vals = [Ce.ravel()]
    if backflow:
        for tag in spaces.outlet_tags:
            fq = spaces.patch_quadrature(tag)
            fcn = spaces.cell_nodes[fq.cells]
            fvel = v.reshape(d, -1).T[fcn]
            bn = np.einsum("fqa,fax,fx->fq", fq.N, fvel, fq.normals)
            Be = -0.5 * np.einsum("fq,fq,fqa,fqb->fab", fq.weights, np.minimum(bn, 0.0), fq.N, fq.N)
            rows.append(np.repeat(fcn[:, :, None], nloc, 2).ravel())
            cols.append(np.repeat(fcn[:, None, :], nloc, 1).ravel())
            vals.append(Be.ravel())
    n = spaces.n_nodes
    C = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
    return sp.block_diag([C] * d, format="csr")


# ---------------------------------------------------------------------------
# time stepping


def solve_unsteady(mesh: Mesh | DiscreteSpaces, wk: list[WindkesselParams], inlet: InletWaveform,
                   config: TransientConfig = TransientConfig(), props: FluidProps = FluidProps(),
                   ops: StokesOperators | None = None, p_c0=None) -> TransientResult:
    spaces = mesh if isinstance(mesh, DiscreteSpaces) else build_spaces(mesh)
    if len(wk) != spaces.n_out:
        raise ValueError(f"need {spaces.n_out} Windkessel elements, got {len(wk)}")
    T, dt = inlet.period, config.dt
    m = int(round(T / dt))
    if not np.isclose(m * dt, T, rtol=1e-9):
        raise ValueError("dt must divide the period")
    nsteps = m * config.n_cycles
    ops = ops or stokes_operators(spaces, props, consistency=config.consistency)
    nv, npr, nout = spaces.n_vel, spaces.n_pres, spaces.n_out
    Mv = sp.block_diag([mass_scalar(spaces)] * spaces.dim, format="csr") / dt
    R_eff = np.array([rcr_step_coefficients(w, dt, 0.0)[0] for w in wk])
    unit = inlet_plug_profile(spaces, 1.0)
    dofs, gunit = dirichlet_values(spaces, unit)
    keep = np.ones(spaces.n_forward)
    keep[dofs] = 0.0
    Kfull = forward_matrix(ops, R_eff, Mv)
    Kel, _ = apply_dirichlet(Kfull, np.zeros(spaces.n_forward), dofs, gunit)
    fac = None if config.model == "navier-stokes" else Factorization(Kel)
    Kd = Kfull[:, dofs]
    pc = np.zeros(nout) if p_c0 is None else np.asarray(p_c0, float).copy()
    t = dt * np.arange(nsteps + 1)
    Qin = inlet(t)
    Q = np.zeros((nsteps + 1, nout))
    P = np.zeros((nsteps + 1, nout))
    PC = np.zeros((nsteps + 1, nout))
    PC[0] = pc
    mb = np.zeros(nsteps + 1)
    v = np.zeros(nv)
    snaps_k, snaps = [0], [v.copy()]
    F, Fin = ops.F, ops.F_in
    h_min = float(spaces.mesh.facet_areas.min() if spaces.dim == 2 else np.sqrt(spaces.mesh.facet_areas.min()))
    warned = False
    for k in range(1, nsteps + 1):
        off = np.array([rcr_step_coefficients(w, dt, pcj)[1] for w, pcj in zip(wk, pc)])
        g = Qin[k] * gunit
        rhs = np.zeros(spaces.n_forward)
        rhs[:nv] = Mv @ v + ops.f
        rhs[nv + npr:] = off
        if config.model == "navier-stokes":
            C = convection_matrix(spaces, v, config.backflow)
            Kf = forward_matrix(ops, R_eff, Mv + C)
            Kk, rhs = apply_dirichlet(Kf, rhs, dofs, g)
            x = Factorization(Kk).solve(rhs)
        else:
            rhs = rhs - Kd @ g
            rhs[dofs] = g
            x = fac.solve(rhs)
        v, _, lam = split_solution(spaces, x)
        Qk = F @ v
        pc = np.array([capacitor_update(w, dt, pcj, q) for w, pcj, q in zip(wk, pc, Qk)])
        Q[k], P[k], PC[k] = Qk, lam, pc
        mb[k] = abs(Qk.sum() + Fin @ v)
        if not warned:
            umax = np.max(np.linalg.norm(v.reshape(spaces.dim, -1), axis=0))
            if umax * dt / h_min > config.cfl_warn:
                warnings.warn(f"Courant number {umax * dt / h_min:.2f} exceeds {config.cfl_warn} "
                              f"(implicit scheme, accuracy may suffer)", RuntimeWarning, stacklevel=2)
                warned = True
        if k % config.snapshot_every == 0:
            snaps_k.append(k)
            snaps.append(v.copy())
    return TransientResult(spaces, t, Qin, Q, P, PC, np.array(snaps_k), np.array(snaps), props, T, dt,
                           config.model, mb)


# ---------------------------------------------------------------------------
# wall shear stress and indicators


@dataclass
class WallShearSeries:
    nodes: np.ndarray  # P2 node ids on the wall
    coords: np.ndarray
    times: np.ndarray
    tau: np.ndarray  # (ns, n_nodes, d)
    normals: np.ndarray  # (n_nodes, d) averaged wall normal


class _WallShearOperator:
    """Evaluates the tangential wall traction at wall P2 nodes."""

    def __init__(self, spaces: DiscreteSpaces, props: FluidProps):
        from .fem import bary_gradients, p2_basis
        mesh = spaces.mesh
        d = spaces.dim
        walls = np.flatnonzero(np.isin(mesh.facet_tags, mesh.tag_map.walls))
        cells = mesh.facet_cell[walls]
        cverts = mesh.cells[cells]
        loc = (cverts[:, None, :] == mesh.facets[walls][:, :, None]).argmax(axis=2)
        pts = [np.eye(d + 1)[loc[:, k]] for k in range(d)]
        for a in range(d):
            for b in range(a + 1, d):
                pts.append(0.5 * (np.eye(d + 1)[loc[:, a]] + np.eye(d + 1)[loc[:, b]]))
        L = np.stack(pts, axis=1)  # (nf, nfn, d+1)
        _, dN = p2_basis(L, d)
        G = bary_gradients(mesh.vertices[cverts])
        self.grad = np.einsum("fkam,fmx->fkax", dN, G)
        self.cell_nodes = spaces.cell_nodes[cells]
        fnodes = spaces.facet_p2_nodes[walls]
        self.nodes, inv = np.unique(fnodes, return_inverse=True)
        self.inv = inv.reshape(fnodes.shape)
        self.normals_f = mesh.facet_normals[walls]
        self.w = mesh.facet_areas[walls]
        self.wsum = np.zeros(len(self.nodes))
        np.add.at(self.wsum, self.inv, np.repeat(self.w[:, None], fnodes.shape[1], 1))
        nrm = np.zeros((len(self.nodes), d))
        np.add.at(nrm, self.inv, np.repeat((self.w[:, None] * self.normals_f)[:, None, :], fnodes.shape[1], 1))
        self.normals = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
        self.coords = spaces.node_coords[self.nodes]
        self.nu = props.viscosity
        self.d = d

    def __call__(self, v: np.ndarray) -> np.ndarray:
        d = self.d
        vel = v.reshape(d, -1).T[self.cell_nodes]  # (nf, nloc, d)
        Gv = np.einsum("fac,fkax->fkcx", vel, self.grad)  # d v_c / d x_x
        S = self.nu * (Gv + np.swapaxes(Gv, 2, 3))
        n = self.normals_f
        tr = np.einsum("fkcx,fx->fkc", S, n)
        tau = tr - np.einsum("fkc,fc->fk", tr, n)[..., None] * n[:, None, :]
        acc = np.zeros((len(self.nodes), d))
        np.add.at(acc, self.inv, self.w[:, None, None] * tau)
        return acc / self.wsum[:, None]


def wall_shear_snapshot(spaces: DiscreteSpaces, v: np.ndarray, props: FluidProps = FluidProps()):
    op = _WallShearOperator(spaces, props)
    return op.nodes, op(v)


def wall_shear_series(result: TransientResult, last_cycle: bool = True) -> WallShearSeries:
    if result.snapshots is None or len(result.snapshots) == 0:
        raise ValueError("result holds no velocity snapshots")
    if last_cycle:
        times, snaps = result.last_cycle_snapshots()
    else:
        times, snaps = result.t[result.snapshot_steps], result.snapshots
    if len(times) < 2:
        raise ValueError("not enough snapshots in the requested window")
    op = _WallShearOperator(result.spaces, result.props)
    tau = np.array([op(v) for v in snaps])
    return WallShearSeries(op.nodes, op.coords, times, tau, op.normals)


@dataclass
class IndicatorField:
    nodes: np.ndarray
    coords: np.ndarray
    tawss: np.ndarray
    osi: np.ndarray

    def to_csv(self, path) -> None:
        d = self.coords.shape[1]
        header = ",".join(["node", *["x", "y", "z"][:d], "TAWSS", "OSI"])
        np.savetxt(path, np.column_stack([self.nodes, self.coords, self.tawss, self.osi]), delimiter=",",
                   header=header, comments="", fmt=["%d"] + ["%.12g"] * (d + 2))


def tawss_osi(series: WallShearSeries, period: float | None = None) -> IndicatorField:
    """Time-averaged |tau| and oscillatory shear index over one period."""
    t = np.asarray(series.times, float)
    T = t[-1] - t[0] if len(t) else 0.0
    if not T > 0:
        raise ValueError("zero-length period")
    if period is not None and not np.isclose(T, period, rtol=1e-6):
        raise ValueError(f"series spans {T}, expected one period {period}")
    mag = np.linalg.norm(series.tau, axis=2)
    int_mag = np.trapezoid(mag, t, axis=0)
    int_vec = np.linalg.norm(np.trapezoid(series.tau, t, axis=0), axis=1)
    tawss = int_mag / T
    with np.errstate(invalid="ignore", divide="ignore"):
        osi = np.where(int_mag > 0, 0.5 * (1.0 - int_vec / np.where(int_mag > 0, int_mag, 1.0)), 0.0)
    osi = np.clip(osi, 0.0, 0.5)
    return IndicatorField(series.nodes, series.coords, tawss, osi)


def relative_difference(field, reference) -> np.ndarray:
    """``|f - f_ref| / max(f_ref)`` pointwise."""
    f = np.asarray(field, float)
    ref = np.asarray(reference, float)
    scale = np.max(ref)
    if not scale > 0:
        raise ValueError("reference field must have a positive maximum")
    return np.abs(f - ref) / scale
