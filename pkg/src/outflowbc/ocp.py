"""One-shot optimal control of outlet resistances (and optionally the inlet scale).

All unknowns (state, adjoint, controls and the auxiliary flow scalars) are
stacked in a single vector and the stationarity conditions of the discrete
Lagrangian are solved by Newton's method with an exact Jacobian.

Layout, outlets-only mode::

    [v, p, lam, R, z, b, t, k]

inlet-control mode (weak inlet through a P2 trace multiplier ``mu`` with
adjoint ``y``, scalar control ``u``)::

    [v, p, lam, R, mu, u, z, b, t, k, y]

Strong Dirichlet rows for ``v`` read ``v_D - g``; the matching adjoint rows
read ``z_D = 0``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .baselines import murray_resistances, ohm_resistances
from .fem import (DiscreteSpaces, Factorization, FluidProps, SolverError, StokesOperators, StokesState,
                  assemble_forward, build_spaces, dirichlet_values, inlet_plug_profile, pressure_trace,
                  solve_forward, stokes_operators)
from .measurements import MeasurementSet
from .mesh import Mesh

MODES = ("outlets", "outlets+inlet")


class ConvergenceError(RuntimeError):
    """Newton did not converge; ``trace`` holds the residual history."""

    def __init__(self, msg, trace=None, result=None):
        super().__init__(msg)
        self.trace = trace or []
        self.result = result


@dataclass(frozen=True)
class ControlVector:
    R: np.ndarray
    u_in: float = 1.0

    def __post_init__(self):
        R = np.asarray(self.R, float)
        if R.ndim != 1 or R.size < 1 or not np.all(np.isfinite(R)) or not np.isfinite(self.u_in):
            raise ValueError("controls must be finite")
        object.__setattr__(self, "R", R)


@dataclass
class AdjointState:
    z: np.ndarray
    b: np.ndarray
    t: np.ndarray
    k: np.ndarray
    mu: np.ndarray | None = None  # inlet traction multiplier (inlet mode)
    y: np.ndarray | None = None  # its adjoint


@dataclass(frozen=True)
class OCPConfig:
    mode: str = "outlets"
    R0: str | np.ndarray = "ohm"  # "ohm", "murray" or explicit vector
    rtol: float = 1e-9
    atol: float = 1e-11
    max_iter: int = 50
    max_halvings: int = 8
    armijo: float = 1e-4
    tikhonov: float = 0.0
    consistency: str = "unscaled"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not (self.rtol > 0 and self.atol > 0 and self.max_iter > 0):
            raise ValueError("tolerances and max_iter must be positive")


# ---------------------------------------------------------------------------
# cost


def _pressure_data(spaces: DiscreteSpaces, ms: MeasurementSet):
    M, m, area = pressure_trace(spaces, ms.pressure_tag)
    return M, m, area


def cost_terms(spaces, v, p, ms: MeasurementSet, mode: str = "outlets", F=None, F_in=None, pdata=None) -> dict:
    """Terms of the misfit functional for nodal vectors ``v``, ``p``."""
    if ms.target_pressure == 0 or any(q == 0 for q in ms.outlet_flows):
        raise ZeroDivisionError("measured flows and pressure must be non-zero")
    M, m, area = pdata or _pressure_data(spaces, ms)
    pd = ms.target_pressure
    # int (p - pd)^2 over the patch, expanded to stay quadrature exact
    num = p @ (M @ p) - 2 * pd * (m @ p) + pd ** 2 * area
    pres = 0.5 * ms.weight_pressure * max(num, 0.0) / (pd ** 2 * area)
    if F is None:
        from .fem import flux_vector
        F = np.vstack([flux_vector(spaces, t) for t in spaces.outlet_tags])
    flows = np.asarray(F @ v).ravel()
    Q = np.asarray(ms.outlet_flows)
    outs = 0.5 * np.asarray(ms.weight_outlets) * (flows - Q) ** 2 / Q ** 2
    terms = {"pressure": float(pres), "outlets": outs.tolist()}
    J = pres + outs.sum()
    if mode == "outlets+inlet":
        if F_in is None:
            from .fem import flux_vector
            F_in = flux_vector(spaces, spaces.inlet_tag)
        q_in = -float(F_in @ v)
        tin = 0.5 * ms.weight_inlet * (q_in - ms.inlet_flow) ** 2 / ms.inlet_flow ** 2
        terms["inlet"] = float(tin)
        J += tin
    return {"J": float(J), "terms": terms}


def evaluate_cost(state: StokesState, ms: MeasurementSet, mode: str = "outlets") -> dict:
    return cost_terms(state.spaces, state.v, state.p, ms, mode)


# ---------------------------------------------------------------------------
# optimality system


def _inlet_trace(spaces: DiscreteSpaces) -> sp.csr_matrix:
    """``E[(c, a), (c, b)] = int_in phi_a phi_b`` for inlet nodes ``a``."""
    fq = spaces.patch_quadrature(spaces.inlet_tag)
    cn = spaces.cell_nodes[fq.cells]
    nloc = cn.shape[1]
    Me = np.einsum("fq,fqa,fqb->fab", fq.weights, fq.N, fq.N)
    n = spaces.n_nodes
    Mfull = sp.coo_matrix((Me.ravel(), (np.repeat(cn[:, :, None], nloc, 2).ravel(),
                                        np.repeat(cn[:, None, :], nloc, 1).ravel())), shape=(n, n)).tocsr()
    Ms = Mfull[spaces.inlet_nodes]
    return sp.block_diag([Ms] * spaces.dim, format="csr")


class OptimalityProblem:
    """Residual and exact Jacobian of the discrete first-order conditions."""

    def __init__(self, spaces: DiscreteSpaces, props: FluidProps, ms: MeasurementSet, mode: str = "outlets",
                 ops: StokesOperators | None = None, tikhonov: float = 0.0, R_ref=None,
                 consistency: str = "unscaled"):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        ms.check_tags(spaces.mesh.tag_map)
        self.spaces, self.props, self.ms, self.mode = spaces, props, ms, mode
        self.ops = ops or stokes_operators(spaces, props, consistency=consistency)
        self.F = self.ops.F
        self.Fd = self.F.toarray()
        self.F_in = self.ops.F_in
        self.pdata = _pressure_data(spaces, ms)
        self.tikhonov = tikhonov
        self.R_ref = None if R_ref is None else np.asarray(R_ref, float)
        nv, npr, m = spaces.n_vel, spaces.n_pres, spaces.n_out
        self.inlet_mode = mode == "outlets+inlet"
        if self.inlet_mode:
            self.E = _inlet_trace(spaces)
            plug = inlet_plug_profile(spaces, ms.inlet_flow)
            vin = np.zeros(nv)
            vin[spaces.vel_dofs(plug.nodes).ravel()] = plug.values.T.ravel()
            self.g_in = self.E @ vin
            self.plug = plug
            dofs, vals = dirichlet_values(spaces, None)
            nmu = self.E.shape[0]
        else:
            self.plug = inlet_plug_profile(spaces, ms.inlet_flow)
            dofs, vals = dirichlet_values(spaces, self.plug)
            nmu = 0
        self.dir_dofs, self.dir_vals = dofs, vals
        keep = np.ones(nv)
        keep[dofs] = 0.0
        self.keep = keep
        self.P = sp.diags(keep)
        self.Dm = sp.diags(1.0 - keep)
        g = np.zeros(nv)
        g[dofs] = vals
        self.g = g
        sizes = [("v", nv), ("p", npr), ("lam", m), ("R", m)]
        if self.inlet_mode:
            sizes += [("mu", nmu), ("u", 1)]
        sizes += [("z", nv), ("b", npr), ("t", m), ("k", m)]
        if self.inlet_mode:
            sizes += [("y", nmu)]
        self.slices = {}
        o = 0
        for name, n in sizes:
            self.slices[name] = slice(o, o + n)
            o += n
        self.size = o
        self.order = [s[0] for s in sizes]
        Q = np.asarray(ms.outlet_flows)
        self.wq = np.asarray(ms.weight_outlets) / Q ** 2
        M, mvec, area = self.pdata
        self.cp = ms.weight_pressure / (ms.target_pressure ** 2 * area)
        self.PA = (self.P @ self.ops.A).tocsr()
        self.PAT = (self.P @ self.ops.A.T).tocsr()
        self.PBT = (self.P @ self.ops.B.T).tocsr()
        self.PFT = (self.P @ self.F.T).tocsr()
        if self.inlet_mode:
            self.PET = (self.P @ self.E.T).tocsr()
            self.win = ms.weight_inlet / ms.inlet_flow ** 2

    # -- packing -------------------------------------------------------------
    def split(self, x) -> dict:
        return {k: x[s] for k, s in self.slices.items()}

    def pack(self, **parts) -> np.ndarray:
        x = np.zeros(self.size)
        for k, v in parts.items():
            x[self.slices[k]] = v
        return x

    # -- residual ------------------------------------------------------------
    def residual(self, x: np.ndarray) -> np.ndarray:
        u = self.split(x)
        ops, P = self.ops, self.P
        M, mvec, _ = self.pdata
        pd = self.ms.target_pressure
        Q = np.asarray(self.ms.outlet_flows)
        Fv = self.F @ u["v"]
        coef = -u["t"] * u["R"] + self.wq * (u["k"] - Q)
        r = np.zeros(self.size)
        rv = self.PAT @ u["z"] + self.PBT @ u["b"] + self.PFT @ coef
        if self.inlet_mode:
            rv += self.PET @ u["y"]
            q_in = -(self.F_in @ u["v"])
            rv += P @ (self.win * (q_in - self.ms.inlet_flow) * (-self.F_in))
        rv += (1.0 - self.keep) * u["z"]
        r[self.slices["v"]] = rv
        r[self.slices["p"]] = self.cp * (M @ u["p"] - pd * mvec) - ops.B @ u["z"]
        r[self.slices["lam"]] = self.F @ u["z"] + u["t"]
        rR = -u["t"] * Fv
        if self.tikhonov:
            rR += self.tikhonov * (u["R"] - self.R_ref) / self.R_ref ** 2
        r[self.slices["R"]] = rR
        rz = self.PA @ u["v"] - self.PBT @ u["p"] + self.PFT @ u["lam"] - P @ ops.f
        if self.inlet_mode:
            rz += self.PET @ u["mu"]
        rz += (1.0 - self.keep) * (u["v"] - self.g)
        r[self.slices["z"]] = rz
        r[self.slices["b"]] = ops.B @ u["v"]
        r[self.slices["t"]] = u["lam"] - u["R"] * Fv
        r[self.slices["k"]] = u["k"] - Fv
        if self.inlet_mode:
            r[self.slices["mu"]] = self.E @ u["z"]
            r[self.slices["u"]] = -(u["y"] @ self.g_in)
            r[self.slices["y"]] = self.E @ u["v"] - u["u"][0] * self.g_in
        return r

    # -- Jacobian ------------------------------------------------------------
    def jacobian(self, x: np.ndarray) -> sp.csr_matrix:
        u = self.split(x)
        ops, P, F = self.ops, self.P, self.F
        M, _, _ = self.pdata
        m = self.spaces.n_out
        Fv = F @ u["v"]
        I = sp.identity(m, format="csr")
        blocks: dict[tuple[str, str], sp.spmatrix] = {}
        blocks["v", "R"] = self.PFT @ sp.diags(-u["t"])
        blocks["v", "z"] = self.PAT + self.Dm
        blocks["v", "b"] = self.PBT
        blocks["v", "t"] = self.PFT @ sp.diags(-u["R"])
        blocks["v", "k"] = self.PFT @ sp.diags(self.wq)
        blocks["p", "p"] = self.cp * M
        blocks["p", "z"] = -ops.B
        blocks["lam", "z"] = F
        blocks["lam", "t"] = I
        blocks["R", "v"] = sp.diags(-u["t"]) @ F
        rr = -Fv
        blocks["R", "t"] = sp.diags(rr)
        if self.tikhonov:
            blocks["R", "R"] = sp.diags(self.tikhonov / self.R_ref ** 2)
        blocks["z", "v"] = self.PA + self.Dm
        blocks["z", "p"] = -self.PBT
        blocks["z", "lam"] = self.PFT
        blocks["b", "v"] = ops.B
        blocks["t", "v"] = sp.diags(-u["R"]) @ F
        blocks["t", "lam"] = I
        blocks["t", "R"] = sp.diags(-Fv)
        blocks["k", "v"] = -F
        blocks["k", "k"] = I
        if self.inlet_mode:
            fin = sp.csr_matrix(self.F_in[None, :])
            blocks["v", "v"] = self.win * (P @ (fin.T @ fin))
            blocks["v", "y"] = self.PET
            blocks["z", "mu"] = self.PET
            blocks["mu", "z"] = self.E
            blocks["u", "y"] = sp.csr_matrix(-self.g_in[None, :])
            blocks["y", "v"] = self.E
            blocks["y", "u"] = sp.csr_matrix(-self.g_in[:, None])
        names = self.order
        rows = []
        for a in names:
            row = []
            for c in names:
                blk = blocks.get((a, c))
                row.append(blk)
            rows.append(row)
        # bmat needs at least one block per row/column to infer shapes
        for a in names:
            na = self.slices[a].stop - self.slices[a].start
            i = names.index(a)
            if all(b is None for b in rows[i]):
                rows[i][i] = sp.csr_matrix((na, na))
        for j, c in enumerate(names):
            nc = self.slices[c].stop - self.slices[c].start
            if all(rows[i][j] is None for i in range(len(names))):
                rows[j][j] = sp.csr_matrix((nc, nc))
        return sp.bmat(rows, format="csr")

    # -- helpers -------------------------------------------------------------
    def initial_guess(self, R0, state: StokesState | None = None) -> np.ndarray:
        R0 = np.asarray(R0, float)
        if state is None:
            state = solve_forward(assemble_forward(self.spaces, self.props, R0, self.plug, ops=self.ops))
        parts = dict(v=state.v, p=state.p, lam=state.lam, R=R0, k=self.F @ state.v)
        if self.inlet_mode:
            parts["u"] = np.array([1.0])
            # traction multiplier consistent with the strong solution
            rz = self.ops.A @ state.v - self.ops.B.T @ state.p + self.F.T @ state.lam - self.ops.f
            inlet_dofs = self.spaces.vel_dofs(self.spaces.inlet_nodes).ravel()
            Ein = self.E[:, inlet_dofs]
            parts["mu"] = spsolve(Ein.T.tocsc(), -rz[inlet_dofs])
        return self.pack(**parts)

    def state_of(self, x) -> StokesState:
        u = self.split(x)
        return StokesState(self.spaces, u["v"].copy(), u["p"].copy(), u["lam"].copy())

    def adjoint_of(self, x) -> AdjointState:
        u = self.split(x)
        return AdjointState(u["z"].copy(), u["b"].copy(), u["t"].copy(), u["k"].copy(),
                            u["mu"].copy() if self.inlet_mode else None,
                            u["y"].copy() if self.inlet_mode else None)

    def cost(self, x) -> dict:
        u = self.split(x)
        return cost_terms(self.spaces, u["v"], u["p"], self.ms, self.mode, F=self.Fd, F_in=self.F_in,
                          pdata=self.pdata)

    def column_scales(self) -> np.ndarray:
        """Typical magnitudes of every unknown, from the data alone.

        Adjoint scales follow from requiring each Lagrangian pairing
        (adjoint times state residual) to be of the order of the cost.
        """
        ms = self.ms
        pd, Qin = ms.target_pressure, ms.inlet_flow
        area_in = self.spaces.patch(self.spaces.inlet_tag).area
        U = Qin / area_in
        scales = {"v": U, "p": pd, "lam": pd, "R": pd / Qin, "k": Qin, "mu": pd, "u": 1.0,
                  "z": 1.0 / (pd * area_in), "b": 1.0 / Qin, "t": 1.0 / pd, "y": 1.0 / Qin}
        c = np.empty(self.size)
        for k, s in self.slices.items():
            c[s] = scales[k]
        return c

    def relative_residual(self, x) -> float:
        """Componentwise relative KKT residual (infinity norm)."""
        den = abs(self.jacobian(x)) @ self.column_scales() + np.abs(self.residual(np.zeros_like(x)))
        return float(np.max(np.abs(self.residual(x)) / np.where(den > 0, den, 1.0)))

    def block_norms(self, r) -> dict:
        return {k: float(np.linalg.norm(r[s])) for k, s in self.slices.items()}


def assemble_optimality_system(spaces, props, ms, x, mode="outlets", **kw):
    """Residual vector and Jacobian at the stacked unknown vector ``x``."""
    prob = OptimalityProblem(spaces, props, ms, mode, **kw)
    return prob.residual(x), prob.jacobian(x), prob


# ---------------------------------------------------------------------------
# Newton driver


@dataclass
class CalibrationResult:
    controls: ControlVector
    state: StokesState
    adjoint: AdjointState
    J: float
    terms: dict
    trace: list
    seconds: float
    converged: bool
    mode: str
    kkt_relative: float
    measurements: MeasurementSet = field(repr=False, default=None)

    @property
    def R(self) -> np.ndarray:
        return self.controls.R

    def flows(self) -> dict:
        sp_ = self.state.spaces
        out = {int(t): self.state.flow(t) for t in sp_.outlet_tags}
        out["inlet"] = -self.state.flow(sp_.inlet_tag)
        return out

    def to_dict(self) -> dict:
        sp_ = self.state.spaces
        ms = self.measurements
        flows = self.flows()
        mean_p = self.state.mean_pressure(ms.pressure_tag) if ms else None
        errors = {}
        if ms is not None:
            errors["pressure"] = 100 * (mean_p - ms.target_pressure) / ms.target_pressure
            for t, q in zip(ms.outlet_tags, ms.outlet_flows):
                errors[str(t)] = 100 * (flows[t] - q) / q
            errors["inlet"] = 100 * (flows["inlet"] - ms.inlet_flow) / ms.inlet_flow
        return {
            "method": "ocp-inlet" if self.mode == "outlets+inlet" else "ocp",
            "R": {str(t): float(r) for t, r in zip(sp_.outlet_tags, self.R)},
            "u_in": float(self.controls.u_in),
            "J": self.J,
            "terms": self.terms,
            "newton_trace": self.trace,
            "flows": {str(k): v for k, v in flows.items()},
            "mean_pressure": mean_p,
            "mean_pressure_mmHg": mean_p / 1333.22 if mean_p is not None else None,
            "errors_vs_measurements_percent": errors,
            "converged": self.converged,
            "kkt_relative": self.kkt_relative,
            "seconds": self.seconds,
        }


def initial_resistances(spaces: DiscreteSpaces, ms: MeasurementSet, how="ohm") -> np.ndarray:
    if isinstance(how, str):
        if how == "ohm":
            return ohm_resistances(ms.target_pressure, ms.outlet_flows)
        if how == "murray":
            areas = [spaces.patch(t).area for t in spaces.outlet_tags]
            return murray_resistances(areas, ms.target_pressure, ms.inlet_flow)
        raise ValueError(f"unknown initialization {how!r}")
    R0 = np.asarray(how, float)
    if R0.shape != (spaces.n_out,):
        raise ValueError("R0 has the wrong length")
    return R0


def newton(prob: OptimalityProblem, x0: np.ndarray, cfg: OCPConfig):
    """Damped Newton on the stacked residual.

    Progress is measured by the componentwise relative residual
    ``r_i / (sum_j |J_ij| c_j + |r_i(0)|)`` with data-derived unknown scales
    ``c`` (see ``OptimalityProblem.column_scales``), fixed at ``x0``.
    """
    x = x0.copy()
    Jx = prob.jacobian(x)
    den = abs(Jx) @ prob.column_scales() + np.abs(prob.residual(np.zeros_like(x)))
    W = 1.0 / np.where(den > 0, den, 1.0)

    def norm(r):
        return float(np.linalg.norm(W * r, np.inf))

    r = prob.residual(x)
    nr = norm(r)
    trace = [{"iter": 0, "residual": nr, "raw": float(np.linalg.norm(r)), "step": 0.0}]
    converged = nr <= cfg.rtol or np.linalg.norm(r) <= cfg.atol
    it = 0
    while not converged and it < cfg.max_iter:
        it += 1
        try:
            dx = Factorization(Jx).solve(-r, rtol=1e-13)
        except SolverError as exc:
            raise ConvergenceError(f"singular optimality Jacobian at iteration {it}: {exc}", trace) from exc
        alpha = 1.0
        for _ in range(cfg.max_halvings + 1):
            xt = x + alpha * dx
            rt = prob.residual(xt)
            nt = norm(rt)
            if np.isfinite(nt) and nt <= (1 - cfg.armijo * alpha) * nr:
                break
            alpha *= 0.5
        else:
            if nr <= 1e3 * cfg.rtol:  # stagnation at round-off level
                break
            raise ConvergenceError(f"line search failed at iteration {it} (residual {nr:.3e})", trace)
        x, r, nr = xt, rt, nt
        trace.append({"iter": it, "residual": nr, "raw": float(np.linalg.norm(r)), "step": alpha})
        converged = nr <= cfg.rtol or np.linalg.norm(r) <= cfg.atol
        if not converged:
            Jx = prob.jacobian(x)
    return x, trace, converged, nr


def solve_ocp(mesh: Mesh | DiscreteSpaces, ms: MeasurementSet, config: OCPConfig = OCPConfig(),
              props: FluidProps = FluidProps(), ops: StokesOperators | None = None,
              raise_on_failure: bool = True) -> CalibrationResult:
    t0 = time.perf_counter()
    spaces = mesh if isinstance(mesh, DiscreteSpaces) else build_spaces(mesh)
    R0 = initial_resistances(spaces, ms, config.R0)
    prob = OptimalityProblem(spaces, props, ms, config.mode, ops=ops, tikhonov=config.tikhonov, R_ref=R0,
                             consistency=config.consistency)
    x0 = prob.initial_guess(R0)
    x, trace, converged, rel = newton(prob, x0, config)
    u = prob.split(x)
    c = prob.cost(x)
    res = CalibrationResult(
        controls=ControlVector(u["R"].copy(), float(u["u"][0]) if prob.inlet_mode else 1.0),
        state=prob.state_of(x), adjoint=prob.adjoint_of(x), J=c["J"], terms=c["terms"], trace=trace,
        seconds=time.perf_counter() - t0, converged=converged, mode=config.mode, kkt_relative=rel,
        measurements=ms)
    if not converged and raise_on_failure:
        raise ConvergenceError(f"Newton did not converge in {config.max_iter} iterations", trace, res)
    return res


# ---------------------------------------------------------------------------
# independent reference: the reduced problem is linear least squares in lam


def reduced_cost(spaces: DiscreteSpaces, ms: MeasurementSet, R, props: FluidProps = FluidProps(),
                 ops: StokesOperators | None = None, mode: str = "outlets") -> float:
    """``J(R)`` by a plain forward solve (strong plug inlet)."""
    ops = ops or stokes_operators(spaces, props)
    plug = inlet_plug_profile(spaces, ms.inlet_flow)
    st = solve_forward(assemble_forward(spaces, props, R, plug, ops=ops))
    return evaluate_cost(st, ms, mode)["J"]


def least_squares_resistances(spaces: DiscreteSpaces, ms: MeasurementSet, props: FluidProps = FluidProps(),
                              ops: StokesOperators | None = None) -> tuple[np.ndarray, float]:
    """Optimal resistances by minimizing over outlet pressures directly.

    With prescribed outlet pressures the state is affine in them, so the
    cost is quadratic; the minimizer gives ``R_i = lam_i / Q_i``. This
    bypasses the adjoint system entirely.
    """
    ops = ops or stokes_operators(spaces, props)
    plug = inlet_plug_profile(spaces, ms.inlet_flow)
    m = spaces.n_out
    cols = []
    for j in range(m + 1):
        P = np.zeros(m)
        inl = plug
        if j > 0:
            P[j - 1] = 1.0
            inl = plug.scaled(0.0)
        st = solve_forward(assemble_forward(spaces, props, np.zeros(m), inl, ops=ops, outlet_pressures=P))
        cols.append(st)
    base = cols[0]
    M, mvec, area = pressure_trace(spaces, ms.pressure_tag)
    F = ops.F
    pd = ms.target_pressure
    Q = np.asarray(ms.outlet_flows)
    # residual vector r(P) = r0 + G P with weighted rows
    sq = np.sqrt(np.asarray(ms.weight_outlets)) / Q
    # pressure misfit via Cholesky-free form: use mean and fluctuation exactly
    # J_p = a/2 * (p^T M p - 2 pd m^T p + pd^2 area)
    Pm = [c.p for c in cols[1:]]
    Fm = [F @ c.v for c in cols[1:]]
    G_flow = np.column_stack(Fm) * sq[:, None]
    r_flow = (F @ base.v - Q) * sq
    a = ms.weight_pressure / (pd ** 2 * area)
    Hp = a * np.array([[pi @ (M @ pj) for pj in Pm] for pi in Pm])
    gp = a * np.array([pi @ (M @ base.p) - pd * (mvec @ pi) for pi in Pm])
    H = G_flow.T @ G_flow + Hp
    g = G_flow.T @ r_flow + gp
    lam = np.linalg.solve(H, -g)
    v = base.v + sum(l * c.v for l, c in zip(lam, cols[1:]))
    p = base.p + sum(l * c.p for l, c in zip(lam, cols[1:]))
    flows = F @ v
    J = cost_terms(spaces, v, p, ms, F=F.toarray(), pdata=(M, mvec, area))["J"]
    return lam / flows, J
