"""Taylor-Hood (P2/P1) Stokes discretization with resistive outlets.

Unknown layout of the forward system is ``[v, p, lam]``:

* ``v``: velocity, component-blocked, ``dof = comp * n_nodes + node`` where
  P2 nodes are the mesh vertices followed by the edge midpoints (edges in
  lexicographic order of their sorted vertex pairs);
* ``p``: P1 pressure, one value per vertex;
* ``lam``: one scalar per outlet, the outlet pressure ``R_i * Q_i``.

The outlet rows read ``lam_i - R_i * int_{Gamma_i} v.n = 0`` (the facet
integral of ``lam_i / |Gamma_i|`` is simply ``lam_i``). The momentum rows
carry the two outlet boundary terms of the coupled-multidomain weak form.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from functools import cached_property
from math import factorial

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .mesh import BoundaryPatch, Mesh, MeshError, patch_geometry
from .quadrature import simplex_rule

log = logging.getLogger(__name__)

CONSISTENCY_MODES = ("unscaled", "viscous", "none")


class SolverError(RuntimeError):
    """Sparse factorization or solve failure."""


@dataclass(frozen=True)
class FluidProps:
    viscosity: float = 0.04  # poise

    def __post_init__(self):
        if not self.viscosity > 0:
            raise ValueError(f"viscosity must be positive, got {self.viscosity}")


# ---------------------------------------------------------------------------
# P2 basis in barycentric coordinates


def _local_edges(d: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(d + 1) for j in range(i + 1, d + 1)]


def p2_basis(bary: np.ndarray, d: int) -> tuple[np.ndarray, np.ndarray]:
    """P2 values and barycentric derivatives.

    ``bary`` has shape ``(..., d+1)``. Returns ``N`` with shape
    ``(..., nloc)`` and ``dN`` with shape ``(..., nloc, d+1)`` where
    ``dN[..., a, m] = dN_a / dL_m``.
    """
    L = bary
    edges = _local_edges(d)
    nloc = d + 1 + len(edges)
    N = np.empty(L.shape[:-1] + (nloc,))
    dN = np.zeros(L.shape[:-1] + (nloc, d + 1))
    for i in range(d + 1):
        N[..., i] = L[..., i] * (2 * L[..., i] - 1)
        dN[..., i, i] = 4 * L[..., i] - 1
    for k, (i, j) in enumerate(edges):
        a = d + 1 + k
        N[..., a] = 4 * L[..., i] * L[..., j]
        dN[..., a, i] = 4 * L[..., j]
        dN[..., a, j] = 4 * L[..., i]
    return N, dN


def bary_gradients(X: np.ndarray) -> np.ndarray:
    """Gradients of barycentric coordinates, ``(nc, d+1, d)``."""
    E = X[:, 1:, :] - X[:, :1, :]
    Ginv = np.linalg.inv(E)  # columns are grad L_1..L_d
    G = np.empty((X.shape[0], X.shape[1], X.shape[2]))
    G[:, 1:, :] = np.transpose(Ginv, (0, 2, 1))
    G[:, 0, :] = -G[:, 1:, :].sum(axis=1)
    return G


@dataclass
class CellQuad:
    weights: np.ndarray  # (nc, nq) physical weights
    N: np.ndarray  # (nq, nloc) P2 values
    grad: np.ndarray  # (nc, nq, nloc, d)
    L: np.ndarray  # (nq, d+1) barycentric points = P1 values
    gradL: np.ndarray  # (nc, d+1, d)
    points: np.ndarray  # (nc, nq, d)


@dataclass
class FacetQuad:
    facets: np.ndarray  # mesh facet indices
    cells: np.ndarray
    weights: np.ndarray  # (nf, nq)
    N: np.ndarray  # (nf, nq, nloc) cell P2 basis at facet points
    grad: np.ndarray  # (nf, nq, nloc, d)
    L: np.ndarray  # (nf, nq, d+1) P1 values
    normals: np.ndarray  # (nf, d)
    points: np.ndarray  # (nf, nq, d)


# ---------------------------------------------------------------------------
# spaces


@dataclass(frozen=True, eq=False)
class DiscreteSpaces:
    """DOF maps for Taylor-Hood velocity/pressure plus outlet multipliers."""

    mesh: Mesh
    cell_nodes: np.ndarray  # (nc, nloc)
    node_coords: np.ndarray
    inlet_nodes: np.ndarray
    wall_nodes: np.ndarray  # excludes nodes shared with the inlet
    outlet_tags: tuple[int, ...]

    @property
    def dim(self) -> int:
        return self.mesh.dim

    @property
    def n_nodes(self) -> int:
        return self.node_coords.shape[0]

    @property
    def n_vel(self) -> int:
        return self.dim * self.n_nodes

    @property
    def n_pres(self) -> int:
        return self.mesh.n_vertices

    @property
    def n_out(self) -> int:
        return len(self.outlet_tags)

    @property
    def n_forward(self) -> int:
        return self.n_vel + self.n_pres + self.n_out

    def vel_dofs(self, nodes: np.ndarray) -> np.ndarray:
        """Component-major DOF indices for ``nodes``, shape ``(d, len(nodes))``."""
        nodes = np.asarray(nodes)
        return np.stack([c * self.n_nodes + nodes for c in range(self.dim)])

    @cached_property
    def patches(self) -> dict[int, BoundaryPatch]:
        return {int(t): patch_geometry(self.mesh, int(t)) for t in np.unique(self.mesh.facet_tags)}

    def patch(self, tag: int) -> BoundaryPatch:
        try:
            return self.patches[int(tag)]
        except KeyError:
            raise MeshError(f"unknown boundary tag {tag}") from None

    @cached_property
    def inlet_tag(self) -> int:
        return self.mesh.tag_map.inlet

    @cached_property
    def cell_quad(self) -> CellQuad:
        return self.cell_quadrature(4)

    def cell_quadrature(self, degree: int) -> CellQuad:
        d = self.dim
        bary, w = simplex_rule(d, degree)
        X = self.mesh.vertices[self.mesh.cells]
        G = bary_gradients(X)
        N, dN = p2_basis(bary, d)
        grad = np.einsum("qam,cmx->cqax", dN, G)
        weights = np.abs(self.mesh.cell_volumes)[:, None] * factorial(d) * w[None, :]
        points = np.einsum("qm,cmx->cqx", bary, X)
        return CellQuad(weights, N, grad, bary, G, points)

    def facet_quadrature(self, facets: np.ndarray, degree: int = 4) -> FacetQuad:
        d = self.dim
        facets = np.asarray(facets, dtype=np.int64)
        mesh = self.mesh
        cells = mesh.facet_cell[facets]
        cverts = mesh.cells[cells]
        fverts = mesh.facets[facets]
        # cell-local index of each facet vertex
        loc = (cverts[:, None, :] == fverts[:, :, None]).argmax(axis=2)
        mu, w = simplex_rule(d - 1, degree)
        L = np.zeros((len(facets), len(w), d + 1))
        fi = np.arange(len(facets))[:, None]
        qi = np.arange(len(w))[None, :]
        for k in range(d):
            L[fi, qi, loc[:, k][:, None]] = mu[None, :, k]
        N, dN = p2_basis(L, d)
        G = bary_gradients(mesh.vertices[cverts])
        grad = np.einsum("fqam,fmx->fqax", dN, G)
        weights = mesh.facet_areas[facets][:, None] * factorial(d - 1) * w[None, :]
        points = np.einsum("fqm,fmx->fqx", L, mesh.vertices[cverts])
        return FacetQuad(facets, cells, weights, N, grad, L, mesh.facet_normals[facets], points)

    def patch_quadrature(self, tag: int, degree: int = 4) -> FacetQuad:
        return self.facet_quadrature(self.patch(tag).facets, degree)

    @cached_property
    def facet_p2_nodes(self) -> np.ndarray:
        """P2 nodes lying on each boundary facet (vertices, then edges)."""
        mesh = self.mesh
        d = self.dim
        cverts = mesh.cells[mesh.facet_cell]
        loc = (cverts[:, None, :] == mesh.facets[:, :, None]).argmax(axis=2)
        edges = _local_edges(d)
        eidx = {e: d + 1 + k for k, e in enumerate(edges)}
        cn = self.cell_nodes[mesh.facet_cell]
        cols = [loc[:, k] for k in range(d)]
        for a in range(d):
            for b in range(a + 1, d):
                i, j = np.minimum(loc[:, a], loc[:, b]), np.maximum(loc[:, a], loc[:, b])
                col = np.array([eidx[(x, y)] for x, y in zip(i, j)])
                cols.append(col)
        return np.stack([cn[np.arange(len(cn)), c] for c in cols], axis=1)

    def patch_nodes(self, tag: int) -> np.ndarray:
        return np.unique(self.facet_p2_nodes[self.patch(tag).facets])

    def summary(self) -> dict:
        return {"velocity_dofs": self.n_vel, "pressure_dofs": self.n_pres,
                "multipliers": self.n_out, "p2_nodes": self.n_nodes}


def build_spaces(mesh: Mesh) -> DiscreteSpaces:
    if mesh.tag_map is None:
        raise MeshError("mesh needs a tag map to build discrete spaces")
    d = mesh.dim
    nv = mesh.n_vertices
    edges = mesh.edges
    keys = edges[:, 0] * nv + edges[:, 1]
    cols = [mesh.cells[:, i] for i in range(d + 1)]
    for i, j in _local_edges(d):
        a = np.minimum(mesh.cells[:, i], mesh.cells[:, j])
        b = np.maximum(mesh.cells[:, i], mesh.cells[:, j])
        cols.append(nv + np.searchsorted(keys, a * nv + b))
    cell_nodes = np.column_stack(cols)
    node_coords = np.vstack([mesh.vertices, 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])])
    spaces = DiscreteSpaces(mesh, cell_nodes, node_coords, np.zeros(0, int), np.zeros(0, int),
                            tuple(mesh.tag_map.outlets))
    fn = spaces.facet_p2_nodes
    inlet = np.unique(fn[mesh.facet_tags == mesh.tag_map.inlet])
    wall_mask = np.isin(mesh.facet_tags, mesh.tag_map.walls)
    wall = np.setdiff1d(np.unique(fn[wall_mask]), inlet)
    object.__setattr__(spaces, "inlet_nodes", inlet)
    object.__setattr__(spaces, "wall_nodes", wall)
    return spaces


# ---------------------------------------------------------------------------
# boundary data


@dataclass(frozen=True)
class DirichletData:
    """Nodal velocity values on a set of P2 nodes."""

    nodes: np.ndarray
    values: np.ndarray  # (len(nodes), d)

    def scaled(self, s: float) -> "DirichletData":
        return DirichletData(self.nodes, s * self.values)


def inlet_plug_profile(spaces: DiscreteSpaces, Q_in: float, patch: BoundaryPatch | None = None) -> DirichletData:
    """Uniform inward velocity carrying ``Q_in`` through the inlet patch.

    Each node gets ``-U n`` with ``U = Q_in / |Gamma_in|``; at kinks of a
    polyline inlet the node value is the vector whose projection on every
    adjacent facet normal is ``-U``, so the discrete flux is exactly
    ``-Q_in``.
    """
    patch = patch or spaces.patch(spaces.inlet_tag)
    if patch.area <= 0:
        raise MeshError("inlet patch has zero area")
    if Q_in < 0:
        raise ValueError("inlet flow must be non-negative")
    U = Q_in / patch.area
    fn = spaces.facet_p2_nodes[patch.facets]
    nodes = np.unique(fn)
    pos = np.searchsorted(nodes, fn)
    d = spaces.dim
    A = np.zeros((len(nodes), d, d))
    b = np.zeros((len(nodes), d))
    for k in range(fn.shape[1]):
        np.add.at(A, pos[:, k], np.einsum("fi,fj->fij", patch.facet_normals, patch.facet_normals))
        np.add.at(b, pos[:, k], patch.facet_normals)
    vals = -U * np.einsum("nij,nj->ni", np.linalg.pinv(A, rcond=1e-10), b)
    return DirichletData(nodes, vals)


def nodal_dirichlet(spaces: DiscreteSpaces, func) -> DirichletData:
    """Inlet values from a callable ``func(x) -> (n, d)``."""
    nodes = spaces.inlet_nodes
    return DirichletData(nodes, np.asarray(func(spaces.node_coords[nodes]), float))


# ---------------------------------------------------------------------------
# assembly


def _scatter(rows, cols, vals, shape):
    return sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=shape).tocsr()


def _blockdiag(K: sp.spmatrix, d: int) -> sp.csr_matrix:
    return sp.block_diag([K] * d, format="csr")


@dataclass(eq=False)
class StokesOperators:
    """R-independent matrices of the Stokes problem.

    ``A``: velocity block (viscous + outlet boundary terms); ``B``:
    ``int q div(w)`` (pressure rows x velocity columns); ``F``: outlet flux
    rows ``int_{Gamma_i} w.n``; ``f``: body-force load.
    """

    spaces: DiscreteSpaces
    props: FluidProps
    A: sp.csr_matrix
    B: sp.csr_matrix
    F: sp.csr_matrix
    f: np.ndarray
    consistency: str

    @cached_property
    def F_in(self) -> np.ndarray:
        return flux_vector(self.spaces, self.spaces.inlet_tag)


def stiffness_scalar(spaces: DiscreteSpaces) -> sp.csr_matrix:
    cq = spaces.cell_quad
    Ke = np.einsum("cq,cqax,cqbx->cab", cq.weights, cq.grad, cq.grad)
    cn = spaces.cell_nodes
    n = spaces.n_nodes
    return _scatter(np.repeat(cn[:, :, None], cn.shape[1], 2), np.repeat(cn[:, None, :], cn.shape[1], 1), Ke, (n, n))


def mass_scalar(spaces: DiscreteSpaces) -> sp.csr_matrix:
    cq = spaces.cell_quad
    Me = np.einsum("cq,qa,qb->cab", cq.weights, cq.N, cq.N)
    cn = spaces.cell_nodes
    n = spaces.n_nodes
    return _scatter(np.repeat(cn[:, :, None], cn.shape[1], 2), np.repeat(cn[:, None, :], cn.shape[1], 1), Me, (n, n))


def divergence_matrix(spaces: DiscreteSpaces) -> sp.csr_matrix:
    """``B[q, (c, b)] = int psi_q d(phi_b)/dx_c``."""
    cq = spaces.cell_quad
    d = spaces.dim
    cells = spaces.mesh.cells
    cn = spaces.cell_nodes
    blocks = []
    for c in range(d):
        Be = np.einsum("cq,qa,cqb->cab", cq.weights, cq.L, cq.grad[..., c])
        blocks.append(_scatter(np.repeat(cells[:, :, None], cn.shape[1], 2),
                               np.repeat(cn[:, None, :], cells.shape[1], 1), Be,
                               (spaces.n_pres, spaces.n_nodes)))
    return sp.hstack(blocks, format="csr")


def flux_vector(spaces: DiscreteSpaces, tag: int) -> np.ndarray:
    """Row vector of ``int_{Gamma} w.n`` over velocity DOFs."""
    fq = spaces.patch_quadrature(tag)
    cn = spaces.cell_nodes[fq.cells]
    vec = np.zeros(spaces.n_vel)
    base = np.einsum("fq,fqa->fa", fq.weights, fq.N)
    for c in range(spaces.dim):
        np.add.at(vec, c * spaces.n_nodes + cn, base * fq.normals[:, c:c + 1])
    return vec


def pressure_trace(spaces: DiscreteSpaces, tag: int) -> tuple[sp.csr_matrix, np.ndarray, float]:
    """P1 boundary mass matrix, load ``int psi`` and area of patch ``tag``."""
    fq = spaces.patch_quadrature(tag)
    verts = spaces.mesh.cells[fq.cells]
    Me = np.einsum("fq,fqa,fqb->fab", fq.weights, fq.L, fq.L)
    m = np.zeros(spaces.n_pres)
    np.add.at(m, verts, np.einsum("fq,fqa->fa", fq.weights, fq.L))
    nloc = verts.shape[1]
    M = _scatter(np.repeat(verts[:, :, None], nloc, 2), np.repeat(verts[:, None, :], nloc, 1), Me,
                 (spaces.n_pres, spaces.n_pres))
    return M, m, float(fq.weights.sum())


def outlet_consistency_matrix(spaces: DiscreteSpaces, props: FluidProps, mode: str = "unscaled") -> sp.csr_matrix:
    """Outlet boundary terms of the momentum rows.

    ``+ int (w.n)(n . nu grad(v) n)`` and ``- c int w . grad(v) n`` with
    ``c = 1`` (``mode="unscaled"``) or ``c = nu``
    (``mode="viscous"``).
    """
    if mode not in CONSISTENCY_MODES:
        raise ValueError(f"unknown consistency mode {mode!r}")
    n = spaces.n_vel
    if mode == "none":
        return sp.csr_matrix((n, n))
    nu = props.viscosity
    coef = 1.0 if mode == "unscaled" else nu
    d = spaces.dim
    nn = spaces.n_nodes
    rows, cols, vals = [], [], []
    for tag in spaces.outlet_tags:
        fq = spaces.patch_quadrature(tag)
        cn = spaces.cell_nodes[fq.cells]
        nloc = cn.shape[1]
        dn = np.einsum("fqbx,fx->fqb", fq.grad, fq.normals)  # normal derivative of phi_b
        base = np.einsum("fq,fqa,fqb->fab", fq.weights, fq.N, dn)
        R = np.repeat(cn[:, :, None], nloc, 2)
        C = np.repeat(cn[:, None, :], nloc, 1)
        for c in range(d):
            for e in range(d):
                v = nu * base * (fq.normals[:, c] * fq.normals[:, e])[:, None, None]
                if c == e:
                    v = v - coef * base
                rows.append(c * nn + R)
                cols.append(e * nn + C)
                vals.append(v)
    return _scatter(np.concatenate([r.ravel() for r in rows]), np.concatenate([c.ravel() for c in cols]),
                    np.concatenate([v.ravel() for v in vals]), (n, n))


def boundary_load_vector(spaces: DiscreteSpaces, tag: int, traction) -> np.ndarray:
    """``int_Gamma h . w`` over patch ``tag`` for a callable ``h(x, n) -> (m, d)``."""
    fq = spaces.patch_quadrature(tag)
    d = spaces.dim
    pts = fq.points.reshape(-1, d)
    nrm = np.repeat(fq.normals, fq.points.shape[1], axis=0)
    hv = np.asarray(traction(pts, nrm), float).reshape(fq.points.shape)
    cn = spaces.cell_nodes[fq.cells]
    vec = np.zeros(spaces.n_vel)
    for c in range(d):
        np.add.at(vec, c * spaces.n_nodes + cn, np.einsum("fq,fqa,fq->fa", fq.weights, fq.N, hv[..., c]))
    return vec


def body_force_vector(spaces: DiscreteSpaces, force) -> np.ndarray:
    cq = spaces.cell_quadrature(6)
    fvals = np.asarray(force(cq.points.reshape(-1, spaces.dim))).reshape(cq.points.shape)
    vec = np.zeros(spaces.n_vel)
    for c in range(spaces.dim):
        np.add.at(vec, c * spaces.n_nodes + spaces.cell_nodes,
                  np.einsum("cq,qa,cq->ca", cq.weights, cq.N, fvals[..., c]))
    return vec


def stokes_operators(spaces: DiscreteSpaces, props: FluidProps = FluidProps(), body_force=None,
                     consistency: str = "unscaled") -> StokesOperators:
    d = spaces.dim
    A = props.viscosity * _blockdiag(stiffness_scalar(spaces), d)
    A = (A + outlet_consistency_matrix(spaces, props, consistency)).tocsr()
    B = divergence_matrix(spaces)
    F = sp.csr_matrix(np.vstack([flux_vector(spaces, t) for t in spaces.outlet_tags]))
    f = body_force_vector(spaces, body_force) if body_force is not None else np.zeros(spaces.n_vel)
    return StokesOperators(spaces, props, A, B, F, f, consistency)


def dirichlet_values(spaces: DiscreteSpaces, inlet: DirichletData | None) -> tuple[np.ndarray, np.ndarray]:
    """DOFs and values for no-slip walls and (optionally) the inlet."""
    wall = spaces.vel_dofs(spaces.wall_nodes).ravel()
    dofs = [wall]
    vals = [np.zeros(wall.size)]
    if inlet is not None:
        dofs.append(spaces.vel_dofs(inlet.nodes).ravel())
        vals.append(inlet.values.T.ravel())
    return np.concatenate(dofs), np.concatenate(vals)


def apply_dirichlet(K: sp.spmatrix, rhs: np.ndarray, dofs: np.ndarray, values: np.ndarray):
    """Symmetric row/column elimination with a lift."""
    K = K.tocsr()
    n = K.shape[0]
    g = np.zeros(n)
    g[dofs] = values
    rhs = rhs - K @ g
    keep = np.ones(n)
    keep[dofs] = 0.0
    Dk = sp.diags(keep)
    K = (Dk @ K @ Dk + sp.diags(1.0 - keep)).tocsr()
    rhs[dofs] = values
    return K, rhs


@dataclass(eq=False)
class LinearSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    spaces: DiscreteSpaces
    R: np.ndarray


def forward_matrix(ops: StokesOperators, R, extra_velocity: sp.spmatrix | None = None) -> sp.csr_matrix:
    R = np.asarray(R, float)
    m = ops.spaces.n_out
    A = ops.A if extra_velocity is None else (ops.A + extra_velocity)
    lam_rows = sp.hstack([-sp.diags(R) @ ops.F, sp.csr_matrix((m, ops.spaces.n_pres)), sp.identity(m)])
    return sp.vstack([
        sp.hstack([A, -ops.B.T, ops.F.T]),
        sp.hstack([ops.B, sp.csr_matrix((ops.spaces.n_pres, ops.spaces.n_pres + m))]),
        lam_rows,
    ], format="csr")


def assemble_forward(spaces: DiscreteSpaces, props: FluidProps, R, inlet: DirichletData | None,
                     *, ops: StokesOperators | None = None, outlet_offsets=None,
                     extra_velocity: sp.spmatrix | None = None, extra_rhs: np.ndarray | None = None,
                     outlet_pressures=None) -> LinearSystem:
    """Square sparse system over ``(v, p, lam)`` with Dirichlet rows eliminated.

    ``outlet_offsets`` adds a constant to each outlet row
    (``lam_i = R_i Q_i + offset_i``); ``outlet_pressures`` replaces the
    resistive rows by prescribed outlet pressures.
    """
    R = np.asarray(R, float)
    if R.shape != (spaces.n_out,):
        raise ValueError(f"expected {spaces.n_out} resistances, got shape {R.shape}")
    if not np.all(np.isfinite(R)):
        raise ValueError("resistances must be finite")
    if (R < 0).any():
        warnings.warn("negative outlet resistance", RuntimeWarning, stacklevel=2)
    ops = ops or stokes_operators(spaces, props)
    K = forward_matrix(ops, R, extra_velocity)
    rhs = np.zeros(spaces.n_forward)
    rhs[:spaces.n_vel] = ops.f
    if extra_rhs is not None:
        rhs[:spaces.n_vel] += extra_rhs
    lam0 = spaces.n_vel + spaces.n_pres
    if outlet_offsets is not None:
        rhs[lam0:] = np.asarray(outlet_offsets, float)
    if outlet_pressures is not None:
        K = K.tolil()
        for i, P in enumerate(np.asarray(outlet_pressures, float)):
            K.rows[lam0 + i] = [lam0 + i]
            K.data[lam0 + i] = [1.0]
            rhs[lam0 + i] = P
        K = K.tocsr()
    dofs, vals = dirichlet_values(spaces, inlet)
    K, rhs = apply_dirichlet(K, rhs, dofs, vals)
    return LinearSystem(K, rhs, spaces, R)


class Factorization:
    """Thin wrapper around SuperLU with residual-checked solves."""

    def __init__(self, matrix: sp.spmatrix):
        self.matrix = matrix.tocsc()
        try:
            self.lu = splu(self.matrix, permc_spec="COLAMD")
        except RuntimeError as exc:
            raise SolverError(f"sparse LU failed ({exc}); n = {matrix.shape[0]}, "
                              f"nnz = {matrix.nnz}") from exc

    def solve(self, rhs: np.ndarray, rtol: float = 1e-10, refine: int = 3) -> np.ndarray:
        x = self.lu.solve(rhs)
        bnorm = np.linalg.norm(rhs)
        for _ in range(refine):
            r = rhs - self.matrix @ x
            if np.linalg.norm(r) <= rtol * max(bnorm, 1e-300):
                break
            x = x + self.lu.solve(r)
        if not np.all(np.isfinite(x)):
            raise SolverError("non-finite solution; matrix is numerically singular")
        return x

    def residual(self, x, rhs) -> float:
        b = np.linalg.norm(rhs)
        r = np.linalg.norm(rhs - self.matrix @ x)
        return r / b if b > 0 else r


# ---------------------------------------------------------------------------
# state


@dataclass(eq=False)
class StokesState:
    spaces: DiscreteSpaces
    v: np.ndarray
    p: np.ndarray
    lam: np.ndarray
    residual: float = 0.0

    @property
    def velocity(self) -> np.ndarray:
        """Nodal velocity, shape ``(n_nodes, d)``."""
        return self.v.reshape(self.spaces.dim, -1).T

    def flow(self, tag: int) -> float:
        return float(flux_vector(self.spaces, tag) @ self.v)

    def mean_pressure(self, tag: int) -> float:
        _, m, area = pressure_trace(self.spaces, tag)
        return float(m @ self.p / area)

    def nodal_pressure(self) -> np.ndarray:
        """Pressure on all P2 nodes (edge midpoints interpolate linearly)."""
        e = self.spaces.mesh.edges
        return np.concatenate([self.p, 0.5 * (self.p[e[:, 0]] + self.p[e[:, 1]])])


def split_solution(spaces: DiscreteSpaces, x: np.ndarray):
    nv, npr = spaces.n_vel, spaces.n_pres
    return x[:nv], x[nv:nv + npr], x[nv + npr:nv + npr + spaces.n_out]


def solve_forward(system: LinearSystem, rtol: float = 1e-10) -> StokesState:
    fac = Factorization(system.matrix)
    x = fac.solve(system.rhs, rtol=rtol)
    res = fac.residual(x, system.rhs)
    if res > rtol:
        raise SolverError(f"forward residual {res:.2e} exceeds {rtol:.0e}")
    v, p, lam = split_solution(system.spaces, x)
    return StokesState(system.spaces, v, p, lam, res)


def forward_solve(mesh_or_spaces, R, Q_in: float, props: FluidProps = FluidProps(), consistency: str = "unscaled",
                  **kw) -> StokesState:
    """Convenience: plug inflow ``Q_in``, resistances ``R``."""
    spaces = mesh_or_spaces if isinstance(mesh_or_spaces, DiscreteSpaces) else build_spaces(mesh_or_spaces)
    if "ops" not in kw:
        kw["ops"] = stokes_operators(spaces, props, consistency=consistency)
    inlet = inlet_plug_profile(spaces, Q_in)
    return solve_forward(assemble_forward(spaces, props, R, inlet, **kw))


def boundary_functionals(state: StokesState, tag: int) -> dict:
    """Flow ``int v.n`` (outward) and mean pressure over patch ``tag``."""
    return {"Q": state.flow(tag), "mean_p": state.mean_pressure(tag)}


def outlet_summary(state: StokesState) -> dict:
    out = {}
    for i, t in enumerate(state.spaces.outlet_tags):
        f = boundary_functionals(state, t)
        out[int(t)] = {"Q": f["Q"], "mean_p": f["mean_p"], "lambda": float(state.lam[i])}
    return out


def mass_balance(state: StokesState) -> float:
    """``|sum Q_out - Q_in| / Q_in`` with ``Q_in`` the inflow through the inlet."""
    q_in = -state.flow(state.spaces.inlet_tag)
    q_out = sum(state.flow(t) for t in state.spaces.outlet_tags)
    return abs(q_out - q_in) / abs(q_in) if q_in != 0 else abs(q_out)


def export_fields_csv(state: StokesState, path) -> None:
    sp_ = state.spaces
    d = sp_.dim
    coords = sp_.node_coords
    vel = state.velocity
    pn = state.nodal_pressure()
    names = ["x", "y", "z"][:d]
    vnames = ["vx", "vy", "vz"][:d]
    data = np.column_stack([np.arange(sp_.n_nodes), coords, vel, pn])
    header = ",".join(["node", *names, *vnames, "p"])
    fmt = ["%d"] + ["%.12g"] * (2 * d + 1)
    np.savetxt(path, data, delimiter=",", header=header, comments="", fmt=fmt)


# ---------------------------------------------------------------------------
# error norms for verification


def l2_errors(state: StokesState, v_exact, p_exact, degree: int = 8) -> tuple[float, float]:
    """``(||v - v_ex||_L2, ||p - p_ex||_L2)`` by high-order cell quadrature."""
    sp_ = state.spaces
    cq = sp_.cell_quadrature(degree)
    pts = cq.points.reshape(-1, sp_.dim)
    vel = state.velocity[sp_.cell_nodes]  # (nc, nloc, d)
    vh = np.einsum("qa,cax->cqx", cq.N, vel)
    ph = np.einsum("qa,ca->cq", cq.L, state.p[sp_.mesh.cells])
    ve = np.asarray(v_exact(pts)).reshape(vh.shape)
    pe = np.asarray(p_exact(pts)).reshape(ph.shape)
    ev = np.sqrt(np.einsum("cq,cqx->", cq.weights, (vh - ve) ** 2))
    ep = np.sqrt(np.einsum("cq,cq->", cq.weights, (ph - pe) ** 2))
    return float(ev), float(ep)
