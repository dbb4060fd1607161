"""Independent reference computations shared by the test modules."""
import numpy as np

from outflowbc.ocp import reduced_cost


def inlet_scale_closed_form(q_hat, q_in_true, inflation, alpha_in, alpha_out=1.0):
    """Optimal inlet scale and outlet errors when only the total flow is inconsistent.

    With the pressure term and flow split matched exactly, the outlet flows
    are ``Q_i = q_i + mu q_i^2`` (relative errors ``mu q_i``) where
    ``sum Q_i = s``; minimizing over the total ``s`` is a scalar quadratic.
    """
    q = np.asarray(q_hat, float)
    S2 = np.sum(q ** 2) / alpha_out
    target = inflation * q_in_true
    w = alpha_in / target ** 2
    delta = w * (target - q_in_true) / (1.0 / S2 + w)
    s = q_in_true + delta
    rel_err = delta * q / (S2 * alpha_out)
    return s / target, rel_err


def fd_reduced_gradient(spaces, ms, R, ops, h=1e-4):
    """Central differences of ``J`` in ``log R`` (i.e. ``R_i dJ/dR_i``)."""
    R = np.asarray(R, float)
    g = np.zeros_like(R)
    for i in range(len(R)):
        up, dn = R.copy(), R.copy()
        up[i] *= np.exp(h)
        dn[i] *= np.exp(-h)
        g[i] = (reduced_cost(spaces, ms, up, ops=ops) - reduced_cost(spaces, ms, dn, ops=ops)) / (2 * h)
    return g


def fd_jacobian_errors(prob, x, n_dirs=20, seed=0, eps=1e-6):
    """Relative mismatch of central directional differences vs ``J @ d``."""
    rng = np.random.default_rng(seed)
    Jx = prob.jacobian(x)
    scale = prob.column_scales()
    out = []
    for _ in range(n_dirs):
        d = rng.standard_normal(x.size) * scale
        fd = (prob.residual(x + eps * d) - prob.residual(x - eps * d)) / (2 * eps)
        an = Jx @ d
        out.append(np.linalg.norm(fd - an) / np.linalg.norm(an))
    return np.array(out)


def perturbed_iterate(prob, R0, rng_seed=1, size=0.05):
    """A generic non-stationary point: forward state at ``R0`` plus noisy adjoints."""
    rng = np.random.default_rng(rng_seed)
    x = prob.initial_guess(R0)
    c = prob.column_scales()
    for name in ("z", "b", "t", "k") + (("mu", "u", "y") if prob.inlet_mode else ()):
        s = prob.slices[name]
        x[s] += size * c[s] * rng.standard_normal(s.stop - s.start)
    s = prob.slices["R"]
    x[s] *= 1 + size * rng.standard_normal(s.stop - s.start)
    return x
