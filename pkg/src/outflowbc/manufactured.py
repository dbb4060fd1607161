"""Manufactured channel flow for convergence studies (needs sympy).

Plane Poiseuille flow through ``[0, L] x [0, 1]`` plus a divergence-free
perturbation that vanishes with its normal derivative on the walls. The
body force and the outlet traction load follow symbolically, so the
discrete problem with a resistive outlet has the exact solution below.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import (FluidProps, assemble_forward, boundary_load_vector, build_spaces, l2_errors, mass_balance,
                  nodal_dirichlet, solve_forward, stokes_operators)
from .geometry import channel_mesh
from .mesh import refine_uniform


@dataclass
class ManufacturedFlow:
    length: float = 2.0
    Q: float = 1.0
    R: float = 500.0
    amplitude: float = 0.5
    viscosity: float = 0.04

    def __post_init__(self):
        import sympy as sy
        x, y = sy.symbols("x y")
        psi = self.Q * (3 * y ** 2 - 2 * y ** 3) + self.amplitude * y ** 2 * (1 - y) ** 2 * sy.sin(sy.pi * x)
        u, v = sy.diff(psi, y), -sy.diff(psi, x)
        p = self.R * self.Q + sy.cos(sy.pi * x / 2) * (y - sy.Rational(1, 2)) + (self.length - x)
        nu = self.viscosity
        f = [-nu * (sy.diff(c, x, 2) + sy.diff(c, y, 2)) + sy.diff(p, s) for c, s in ((u, x), (v, y))]
        grad = [[sy.diff(c, s) for s in (x, y)] for c in (u, v)]

        def lam(e):
            fn = sy.lambdify((x, y), e, "numpy")
            return lambda X: fn(X[:, 0], X[:, 1]) + 0.0 * X[:, 0]

        self._u, self._v, self._p = lam(u), lam(v), lam(p)
        self._f = [lam(e) for e in f]
        self._g = [[lam(e) for e in row] for row in grad]

    def velocity(self, X):
        return np.column_stack([self._u(X), self._v(X)])

    def pressure(self, X):
        return self._p(X)

    def force(self, X):
        return np.column_stack([self._f[0](X), self._f[1](X)])

    def outlet_load(self, consistency: str):
        """Traction ``h`` such that the exact fields satisfy the outlet rows."""
        nu = self.viscosity
        coef = {"unscaled": 1.0, "viscous": nu, "none": 0.0}[consistency]

        def h(X, n):
            g = np.stack([[self._g[i][j](X) for j in range(2)] for i in range(2)])
            dn = np.einsum("ijm,mj->mi", g, n)
            out = nu * dn - self.pressure(X)[:, None] * n + self.R * self.Q * n
            if consistency != "none":
                out += nu * n * np.einsum("mi,mi->m", n, dn)[:, None] - coef * dn
            return out

        return h

    def solve(self, mesh, consistency: str = "unscaled"):
        props = FluidProps(self.viscosity)
        spaces = build_spaces(mesh)
        ops = stokes_operators(spaces, props, body_force=self.force, consistency=consistency)
        load = boundary_load_vector(spaces, spaces.outlet_tags[0], self.outlet_load(consistency))
        return solve_forward(assemble_forward(spaces, props, [self.R], nodal_dirichlet(spaces, self.velocity),
                                              ops=ops, extra_rhs=load))


def convergence_study(flow: ManufacturedFlow | None = None, levels: int = 4, nx: int = 4, ny: int = 2,
                      consistency: str = "unscaled") -> dict:
    """L2 errors and observed orders over ``levels`` uniformly refined meshes."""
    flow = flow or ManufacturedFlow()
    mesh = channel_mesh(length=flow.length, height=1.0, nx=nx, ny=ny)
    h, ev, ep, mb = [], [], [], []
    for _ in range(levels):
        st = flow.solve(mesh, consistency)
        e = l2_errors(st, flow.velocity, flow.pressure)
        h.append(flow.length / nx)
        ev.append(e[0])
        ep.append(e[1])
        mb.append(mass_balance(st))
        mesh = refine_uniform(mesh)
        nx *= 2
    ev, ep = np.array(ev), np.array(ep)
    return {"h": h, "err_v": ev.tolist(), "err_p": ep.tolist(), "mass_balance": mb,
            "order_v": np.log2(ev[:-1] / ev[1:]).tolist(), "order_p": np.log2(ep[:-1] / ep[1:]).tolist(),
            "consistency": consistency}
