"""Quadrature on reference simplices via collapsed Gauss-Jacobi products."""
from __future__ import annotations

from functools import lru_cache
from math import factorial

import numpy as np
from scipy.special import roots_jacobi


@lru_cache(maxsize=None)
def simplex_rule(dim: int, degree: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(bary, weights)`` for the unit reference simplex of ``dim``.

    ``bary`` has shape ``(nq, dim + 1)`` (barycentric coordinates) and the
    weights sum to the reference volume ``1 / dim!``. The rule integrates
    polynomials up to ``degree`` exactly.
    """
    if dim == 0:
        return np.ones((1, 1)), np.ones(1)
    n = degree // 2 + 1
    # Duffy collapse: coordinate k carries weight (1 - s)^(dim - 1 - k)
    nodes, wts = [], []
    for k in range(dim):
        a = dim - 1 - k
        x, w = roots_jacobi(n, a, 0.0)
        nodes.append(0.5 * (x + 1.0))
        wts.append(w / 2.0 ** (a + 1))
    grids = np.meshgrid(*nodes, indexing="ij")
    wgrid = np.ones_like(grids[0])
    for k, w in enumerate(wts):
        shape = [1] * dim
        shape[k] = n
        wgrid = wgrid * w.reshape(shape)
    s = np.stack([g.ravel() for g in grids], axis=1)
    # map collapsed coordinates to cartesian points of the reference simplex
    pts = np.empty_like(s)
    remaining = np.ones(s.shape[0])
    for k in range(dim):
        pts[:, k] = s[:, k] * remaining
        remaining = remaining * (1.0 - s[:, k])
    bary = np.column_stack([1.0 - pts.sum(axis=1), pts])
    weights = wgrid.ravel()
    # guard against drift in the Jacobi weights
    weights *= (1.0 / factorial(dim)) / weights.sum()
    return bary, weights
