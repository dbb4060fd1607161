"""Murray's-law and Ohm's-law resistance estimates and the 0D least-squares fit."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .measurements import MeasurementSet


def parallel_resistance(R) -> float:
    R = np.asarray(R, float)
    return 1.0 / np.sum(1.0 / R)


def murray_resistances(areas, p_d: float, Q_in: float, exponent: float = 2.0) -> np.ndarray:
    """Split ``R_tot = p_d / Q_in`` so that flow goes like area^(exponent/2).

    With the default exponent 2 (flow proportional to area) this is
    ``R_i = (sum_j A_j / A_i) * R_tot``; the parallel combination is
    ``R_tot`` for any exponent.
    """
    A = np.asarray(areas, float)
    if A.ndim != 1 or A.size == 0 or not np.all(A > 0):
        raise ValueError("areas must be a non-empty vector of positive values")
    if not Q_in > 0 or not p_d > 0:
        raise ValueError("p_d and Q_in must be positive")
    share = A ** (exponent / 2.0)
    return (share.sum() / share) * (p_d / Q_in)


def ohm_resistances(p_d: float, Q) -> np.ndarray:
    Q = np.asarray(Q, float)
    if not np.all(Q > 0):
        raise ValueError("outlet flows must be positive")
    if not p_d > 0:
        raise ValueError("target pressure must be positive")
    return p_d / Q


@dataclass(frozen=True)
class SimplexOptions:
    initial_scale: float = 0.05
    max_evals: int = 4000
    xtol: float = 1e-10  # relative simplex size
    ftol: float = 1e-12  # function spread
    reflection: float = 1.0
    expansion: float = 2.0
    contraction: float = 0.5
    shrink: float = 0.5

    def __post_init__(self):
        for name in ("initial_scale", "max_evals", "xtol", "ftol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class SimplexResult:
    x: np.ndarray
    fun: float
    evals: int
    iterations: int
    converged: bool
    history: list  # best value after each iteration


def nelder_mead(f, x0, opts: SimplexOptions = SimplexOptions()) -> SimplexResult:
    """Standard Nelder-Mead (reflect/expand/contract/shrink), deterministic."""
    x0 = np.atleast_1d(np.asarray(x0, float))
    n = x0.size
    simplex = [x0.copy()]
    for i in range(n):
        x = x0.copy()
        step = opts.initial_scale * (abs(x[i]) if x[i] != 0 else 1.0)
        x[i] += step
        simplex.append(x)
    simplex = np.array(simplex)
    fvals = np.array([f(x) for x in simplex], float)
    if not np.all(np.isfinite(fvals)):
        raise ValueError("objective is not finite on the initial simplex")
    evals = n + 1
    history = []
    it = 0
    converged = False
    while True:
        order = np.argsort(fvals, kind="stable")
        simplex, fvals = simplex[order], fvals[order]
        history.append(float(fvals[0]))
        size = np.max(np.abs(simplex[1:] - simplex[0]))
        scale = max(1.0, np.max(np.abs(simplex[0])))
        if size <= opts.xtol * scale and fvals[-1] - fvals[0] <= opts.ftol:
            converged = True
            break
        if evals >= opts.max_evals:
            break
        it += 1
        c = simplex[:-1].mean(axis=0)
        xr = c + opts.reflection * (c - simplex[-1])
        fr = f(xr)
        evals += 1
        if fr < fvals[0]:
            xe = c + opts.expansion * (xr - c)
            fe = f(xe)
            evals += 1
            if fe < fr:
                simplex[-1], fvals[-1] = xe, fe
            else:
                simplex[-1], fvals[-1] = xr, fr
            continue
        if fr < fvals[-2]:
            simplex[-1], fvals[-1] = xr, fr
            continue
        if fr < fvals[-1]:
            xc = c + opts.contraction * (xr - c)  # outside
            fc = f(xc)
            evals += 1
            if fc <= fr:
                simplex[-1], fvals[-1] = xc, fc
                continue
        else:
            xc = c + opts.contraction * (simplex[-1] - c)  # inside
            fc = f(xc)
            evals += 1
            if fc < fvals[-1]:
                simplex[-1], fvals[-1] = xc, fc
                continue
        simplex[1:] = simplex[0] + opts.shrink * (simplex[1:] - simplex[0])
        fvals[1:] = [f(x) for x in simplex[1:]]
        evals += n
    return SimplexResult(simplex[0].copy(), float(fvals[0]), evals, it, converged, history)


def ohm_cost(R, ms: MeasurementSet) -> tuple[float, dict]:
    """Squared relative misfits of the all-parallel resistor circuit.

    Inlet flow drives ``n`` resistors in parallel: node pressure
    ``R_tot * Q_0`` versus ``p_d``; branch flows ``p_d / R_i`` versus ``Q_i``.
    """
    R = np.asarray(R, float)
    Q = np.asarray(ms.outlet_flows)
    p_d = ms.target_pressure
    pres = ms.weight_pressure * (parallel_resistance(R) * ms.inlet_flow - p_d) ** 2 / p_d ** 2
    flows = np.asarray(ms.weight_outlets) * (p_d / R - Q) ** 2 / Q ** 2
    return float(pres + flows.sum()), {"pressure": float(pres), "outlets": flows.tolist()}


@dataclass
class OhmFit:
    R: np.ndarray
    J: float
    J_start: float
    simplex: SimplexResult


def ohm_optimized(ms: MeasurementSet, opts: SimplexOptions = SimplexOptions()) -> OhmFit:
    """Minimize the resistor-circuit misfit over ``log R`` from the Ohm estimate."""
    R0 = ohm_resistances(ms.target_pressure, ms.outlet_flows)
    J0, _ = ohm_cost(R0, ms)

    def f(y):
        return ohm_cost(np.exp(y), ms)[0]

    res = nelder_mead(f, np.log(R0), opts)
    if res.fun <= J0:
        return OhmFit(np.exp(res.x), res.fun, J0, res)
    return OhmFit(R0, J0, J0, res)
