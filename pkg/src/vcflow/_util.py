"""Small shared numerical helpers (box projections, sparse/dense shims)."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp


def as_csr(mat) -> sp.csr_matrix:
    """Return ``mat`` as a CSR matrix with sorted indices (canonical form)."""
    m = sp.csr_matrix(mat)
    m.sum_duplicates()
    m.sort_indices()
    return m


def as_dense(mat) -> np.ndarray:
    if sp.issparse(mat):
        return mat.toarray()
    return np.asarray(mat, dtype=float)


def project_box(x, lb, ub) -> np.ndarray:
    """Componentwise projection onto [lb, ub]; infinite bounds act as absent."""
    return np.minimum(np.maximum(np.asarray(x, dtype=float), lb), ub)


def polar_residual(v, x, lb, ub, tol=0.0) -> np.ndarray:
    """Componentwise distance of v from the polar tangent cone of a box at x.

    For a coordinate strictly inside its bounds the polar cone is {0}, so the
    residual is |v_j|.  At an active lower bound the cone is (-inf, 0], at an
    active upper bound [0, +inf), and a fixed coordinate (lb == ub) admits any
    value.  Activity is decided with absolute slack ``tol``.
    """
    v = np.asarray(v, dtype=float)
    x = np.asarray(x, dtype=float)
    at_lo = x - lb <= tol
    at_up = ub - x <= tol
    r = np.abs(v)
    r = np.where(at_lo, np.maximum(v, 0.0), r)
    r = np.where(at_up & ~at_lo, np.maximum(-v, 0.0), r)
    r = np.where(at_lo & at_up, 0.0, r)
    return r


def gradient_box_residual(grad, x, lb, ub, tol=0.0) -> np.ndarray:
    """First-order violation of ``min`` stationarity over a box.

    Equivalent to :func:`polar_residual` applied to the anti-gradient: zero at
    a KKT point of ``min f`` over ``[lb, ub]`` where ``grad`` is the gradient.
    """
    return polar_residual(-np.asarray(grad, dtype=float), x, lb, ub, tol)
