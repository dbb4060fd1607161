"""Three-element Windkessel branches in parallel, driven by an inflow waveform."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PROXIMAL_FRACTION = 0.09
TOTAL_COMPLIANCE = 0.001  # cm^5/dyn


@dataclass(frozen=True)
class WindkesselParams:
    R_p: float
    R_d: float
    C: float
    p_distal: float = 0.0

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError("compliance must be positive")
        if self.R_d * self.C < 0 or self.R_p < 0:
            raise ValueError("non-physical Windkessel parameters")

    @property
    def R_total(self) -> float:
        return self.R_p + self.R_d


def split_rcr(R_total, areas, C_total: float = TOTAL_COMPLIANCE,
              proximal_fraction: float = PROXIMAL_FRACTION) -> list[WindkesselParams]:
    R = np.asarray(R_total, float)
    A = np.asarray(areas, float)
    if R.shape != A.shape or not np.all(R > 0) or not np.all(A > 0) or not C_total > 0:
        raise ValueError("need matching positive resistances and areas, and positive compliance")
    out = []
    for r, a in zip(R, A):
        rp = proximal_fraction * r
        out.append(WindkesselParams(rp, r - rp, C_total * a / A.sum()))
    return out


@dataclass(frozen=True)
class InletWaveform:
    """Periodic, piecewise-linear flow waveform Q(t) in cm^3/s."""

    period: float
    t: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, float)
        Q = np.asarray(self.Q, float)
        if not self.period > 0:
            raise ValueError("period must be positive")
        if t.ndim != 1 or t.shape != Q.shape or t.size < 1:
            raise ValueError("samples must be matching 1D arrays")
        if np.any(np.diff(t) <= 0) or t[0] < 0 or t[-1] >= self.period + 1e-12 * self.period:
            raise ValueError("sample times must increase within [0, T)")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "Q", Q)

    def __call__(self, time):
        tt = np.mod(np.asarray(time, float), self.period)
        tp = np.concatenate([self.t, [self.t[0] + self.period]])
        qp = np.concatenate([self.Q, [self.Q[0]]])
        if self.t[0] > 0:
            tp = np.concatenate([[self.t[-1] - self.period], tp])
            qp = np.concatenate([[self.Q[-1]], qp])
        return np.interp(tt, tp, qp)

    def mean(self, n: int = 20000) -> float:
        ts = np.linspace(0, self.period, n + 1)
        return float(np.trapezoid(self(ts), ts) / self.period)

    @classmethod
    def constant(cls, Q: float, period: float = 1.0) -> "InletWaveform":
        return cls(period, np.array([0.0]), np.array([float(Q)]))

    @classmethod
    def template(cls, mean_flow: float, period: float = 1.0, systole: float = 0.35,
                 n: int = 1000) -> "InletWaveform":
        """Half-sine systole over ``systole * T`` then zero flow, scaled to ``mean_flow``."""
        t = np.linspace(0, period, n, endpoint=False)
        ts = systole * period
        Q = np.where(t < ts, np.sin(np.pi * np.minimum(t, ts) / ts), 0.0)
        wf = cls(period, t, Q)
        return cls(period, t, Q * (mean_flow / wf.mean()))

    @classmethod
    def from_csv(cls, path, period: float | None = None) -> "InletWaveform":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or [c.strip() for c in rows[0]] != ["t_s", "Q_cm3_s"]:
            raise ValueError(f"{path}: expected header 't_s,Q_cm3_s'")
        data = np.array([[float(x) for x in r] for r in rows[1:] if r], float)
        t, Q = data[:, 0], data[:, 1]
        if period is None:
            # closing sample at t = T repeats the first one
            if len(t) > 1 and np.isclose(Q[-1], Q[0]):
                period = t[-1] - t[0]
                t, Q = t[:-1], Q[:-1]
            else:
                period = t[-1] + (t[-1] - t[-2])
        return cls(period, t - t[0], Q)

    def to_csv(self, path) -> None:
        np.savetxt(path, np.column_stack([self.t, self.Q]), delimiter=",", header="t_s,Q_cm3_s",
                   comments="", fmt="%.12g")


@dataclass
class NetworkWaveforms:
    t: np.ndarray
    p: np.ndarray  # shared node pressure
    Q: np.ndarray  # (nt, n_branch)
    p_c: np.ndarray  # (nt, n_branch)
    Q0: np.ndarray
    period: float
    dt: float

    @property
    def steps_per_cycle(self) -> int:
        return int(round(self.period / self.dt))

    def to_csv(self, outdir, names=None) -> None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        names = names or [f"outlet{i}" for i in range(self.Q.shape[1])]
        for i, nm in enumerate(names):
            np.savetxt(outdir / f"{nm}.csv", np.column_stack([self.t, self.p, self.Q[:, i]]), delimiter=",",
                       header="t_s,p_dyn_cm2,Q_cm3_s", comments="", fmt="%.12g")


def rc_update_coefficients(wk: WindkesselParams, dt: float) -> tuple[float, float]:
    """``(R_eff, a)`` with branch law ``p = R_eff Q + a (p_c_prev + dt p_dist / (R_d C))``."""
    g = 1.0 + dt / (wk.R_d * wk.C)
    return wk.R_p + (dt / wk.C) / g, 1.0 / g


def steady_capacitor_pressures(params, Q0_mean: float) -> np.ndarray:
    """DC operating point of the network for a constant inflow."""
    R = np.array([w.R_total for w in params])
    pd = np.array([w.p_distal for w in params])
    p = (Q0_mean + np.sum(pd / R)) / np.sum(1.0 / R)
    Q = (p - pd) / R
    return pd + np.array([w.R_d for w in params]) * Q


def _march(pc, Q0, dt, R_eff, a, RdC, Cs, pdist):
    n = len(pc)
    nsteps = len(Q0) - 1
    P = np.zeros(nsteps + 1)
    Q = np.zeros((nsteps + 1, n))
    PC = np.zeros((nsteps + 1, n))
    PC[0] = pc
    inv = 1.0 / R_eff
    for k in range(1, nsteps + 1):
        off = a * (pc + dt * pdist / RdC)
        P[k] = (Q0[k] + np.sum(off * inv)) / np.sum(inv)
        Qk = (P[k] - off) * inv
        # enforce the source split exactly in floating point
        Qk[-1] = Q0[k] - np.sum(Qk[:-1])
        pc = off + (dt / Cs) * a * Qk
        Q[k], PC[k] = Qk, pc
    return P, Q, PC


def simulate_network(params: list[WindkesselParams], inlet: InletWaveform, n_cycles: int = 5,
                     dt: float | None = None, p_c0=None) -> NetworkWaveforms:
    """Backward Euler on the parallel RCR network with flow source ``inlet``.

    ``p_c0`` sets the initial capacitor pressures: ``None`` (zero),
    ``"steady"`` (DC operating point of the mean inflow), ``"periodic"``
    (fixed point of the one-cycle map, i.e. start on the periodic orbit) or
    an explicit vector.
    """
    T = inlet.period
    dt = T / 1000 if dt is None else dt
    if not 0 < dt <= T / 100 * (1 + 1e-12):
        raise ValueError("dt must satisfy 0 < dt <= T/100")
    m = int(round(T / dt))
    if not np.isclose(m * dt, T, rtol=1e-9):
        raise ValueError("dt must divide the period")
    nsteps = n_cycles * m
    n = len(params)
    coef = [rc_update_coefficients(w, dt) for w in params]
    args = (dt, np.array([c[0] for c in coef]), np.array([c[1] for c in coef]),
            np.array([w.R_d * w.C for w in params]), np.array([w.C for w in params]),
            np.array([w.p_distal for w in params]))
    t = dt * np.arange(nsteps + 1)
    Q0 = inlet(t)
    if p_c0 is None:
        pc = np.zeros(n)
    elif isinstance(p_c0, str) and p_c0 == "steady":
        pc = steady_capacitor_pressures(params, inlet.mean())
    elif isinstance(p_c0, str) and p_c0 == "periodic":
        # the one-cycle map is affine: pc_T = M pc_0 + c
        q1 = Q0[:m + 1]
        c = _march(np.zeros(n), q1, *args)[2][-1]
        M = np.column_stack([_march(e, q1, *args)[2][-1] - c for e in np.eye(n)])
        pc = np.linalg.solve(np.eye(n) - M, c)
    else:
        pc = np.asarray(p_c0, float).copy()
    P, Q, PC = _march(pc, Q0, *args)
    # step 0: consistent algebraic split for the given capacitor state
    R_p = np.array([w.R_p for w in params])
    if np.all(R_p > 0):
        P[0] = (Q0[0] + np.sum(pc / R_p)) / np.sum(1.0 / R_p)
        Q[0] = (P[0] - pc) / R_p
    return NetworkWaveforms(t, P, Q, PC, Q0, T, dt)


def cycle_averages(w: NetworkWaveforms, cycle_index: int = -1) -> dict:
    """Trapezoidal means over exactly one period."""
    m = w.steps_per_cycle
    ncyc = (len(w.t) - 1) // m
    if ncyc < 1:
        raise ValueError("incomplete cycle data")
    c = cycle_index % ncyc
    sl = slice(c * m, (c + 1) * m + 1)
    tt = w.t[sl]
    T = tt[-1] - tt[0]

    def mean(y):
        return np.trapezoid(y, tt, axis=0) / T

    return {"p": float(mean(w.p[sl])), "Q": mean(w.Q[sl]).tolist(), "Q0": float(mean(w.Q0[sl])),
            "p_c": mean(w.p_c[sl]).tolist(), "cycle": c}


def summary_json(w: NetworkWaveforms, params, path=None) -> dict:
    avg = cycle_averages(w)
    R = [p.R_total for p in params]
    out = {"last_cycle": avg, "R_total": R,
           "cycle_mean_pressures": [cycle_averages(w, i)["p"] for i in range((len(w.t) - 1) // w.steps_per_cycle)]}
    if path is not None:
        Path(path).write_text(json.dumps(out, indent=2))
    return out
