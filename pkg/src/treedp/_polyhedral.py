"""Small exact-ish polyhedral cone utilities built on linear programming.

A polyhedral cone is given by halfspace rows R, meaning {y : R y <= 0}.
All tests here reduce to bounded LPs solved with HiGHS, which is
deterministic for fixed input, so results are reproducible bit-for-bit.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import linprog

LP_TOL = 1e-9


def _normalize_rows(rows: np.ndarray) -> np.ndarray:
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.size == 0:
        return rows.reshape(0, rows.shape[1] if rows.ndim == 2 else 0)
    norms = np.linalg.norm(rows, axis=1)
    keep = norms > 0
    rows = rows[keep]
    norms = norms[keep]
    return rows / norms[:, None]


def cone_nonzero_direction(rows: np.ndarray, dim: int) -> np.ndarray | None:
    """Return a nonzero y with R y <= 0, or None if the cone is {0}.

    Exact up to LP tolerance: each coordinate is pushed to its maximum and
    minimum over the cone intersected with the unit box; any positive
    optimum certifies a nonzero direction.
    """
    rows = _normalize_rows(rows) if np.size(rows) else np.zeros((0, dim))
    if rows.shape[0] == 0:
        y = np.zeros(dim)
        if dim == 0:
            return None
        y[0] = 1.0
        return y
    A_ub, b_ub = rows, np.zeros(rows.shape[0])
    bounds = [(-1.0, 1.0)] * dim
    for i in range(dim):
        for sign in (1.0, -1.0):
            c = np.zeros(dim)
            c[i] = -sign  # maximize sign * y_i
            res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
            if res.status == 0 and -res.fun > 1e-7:
                y = np.asarray(res.x, dtype=float)
                # clean up LP noise, then re-verify membership
                y[np.abs(y) < 1e-12] = 0.0
                if np.all(rows @ y <= LP_TOL) and np.abs(y).sum() > 0:
                    return y / np.abs(y).sum()
    return None


def cone_is_subspace(rows: np.ndarray, dim: int) -> tuple[bool, np.ndarray | None]:
    """Decide whether {y : R y <= 0} equals {y : R y = 0}.

    Returns (True, None) when the cone is a subspace, else (False, ray)
    with a witness direction that is in the cone but whose negative is not.
    """
    rows = _normalize_rows(rows) if np.size(rows) else np.zeros((0, dim))
    if rows.shape[0] == 0:
        return True, None  # the whole space
    m = rows.shape[0]
    # maximize sum of slacks -(R y) over the cone within the unit box
    c = rows.sum(axis=0)  # minimize sum(R y) = maximize -sum
    res = linprog(
        c, A_ub=rows, b_ub=np.zeros(m), bounds=[(-1.0, 1.0)] * dim, method="highs"
    )
    if res.status == 0 and -res.fun > 1e-7:
        y = np.asarray(res.x, dtype=float)
        y[np.abs(y) < 1e-12] = 0.0
        if np.abs(y).sum() > 0:
            return False, y / np.abs(y).sum()
    return True, None


def kernel_basis(matrix: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis (columns) of the kernel of ``matrix``."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    n = matrix.shape[1]
    if matrix.shape[0] == 0 or not matrix.any():
        return np.eye(n)
    u, s, vt = np.linalg.svd(matrix)
    tol = rtol * max(matrix.shape) * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    return vt[rank:].T.copy()


def orthonormal_complement(basis: np.ndarray, dim: int) -> np.ndarray:
    """Orthonormal basis (columns) of the orthogonal complement of span(basis)."""
    basis = np.asarray(basis, dtype=float)
    if basis.size == 0:
        return np.eye(dim)
    return kernel_basis(basis.T.reshape(-1, dim))
