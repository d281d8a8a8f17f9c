"""Primal active-set solver for strictly convex box-constrained QPs.

Solves  min 1/2 d'Qd + q'd  s.t.  lb <= d <= ub  from a feasible start.
Each iteration solves the equality-constrained problem on the free variables
and then performs an exact piecewise-quadratic line search along the
projected path, so a single iteration can activate many bounds; multiplier
checks release all violating bounds at once.  Free-block systems are
refactored on every working-set change (dense Cholesky below a size
threshold, sparse LU above it).  Tie-breaking is by lowest index throughout,
so runs are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class IndefiniteQP(RuntimeError):
    """The reduced Hessian failed a positive-definiteness check."""


class QpMaxIterations(RuntimeError):
    """Active-set loop exceeded its iteration budget."""


@dataclass
class BoxQpResult:
    x: np.ndarray
    grad: np.ndarray
    working: np.ndarray
    iterations: int


def _solve_free_block(Q, free, rhs):
    """Solve Q[free, free] p = rhs with a PD check; one refinement step."""
    if sp.issparse(Q):
        Qff = Q[free][:, free].tocsc()
        try:
            lu = spla.splu(Qff, permc_spec="MMD_AT_PLUS_A",
                           diag_pivot_thresh=0.1,
                           options={"SymmetricMode": True})
        except RuntimeError as exc:
            raise IndefiniteQP(str(exc)) from exc
        p = lu.solve(rhs)
        p = p + lu.solve(rhs - Qff @ p)
        if not np.all(np.isfinite(p)):
            raise IndefiniteQP("singular reduced system")
        # LU gives no inertia, so guard convexity through the step itself
        curv = float(p @ (Qff @ p))
        if curv <= -1e-14 * float(p @ p):
            raise IndefiniteQP("nonpositive curvature direction")
        return p
    Qff = Q[np.ix_(free, free)]
    try:
        cf = sla.cho_factor(Qff, check_finite=False)
    except (sla.LinAlgError, ValueError) as exc:
        raise IndefiniteQP(str(exc)) from exc
    p = sla.cho_solve(cf, rhs, check_finite=False)
    p = p + sla.cho_solve(cf, rhs - Qff @ p, check_finite=False)
    return p


def _projected_search(Qcol, x, grad, p, free, lb, ub, W):
    """Exact minimization of the quadratic along the projected path x + t*p.

    Walks the bound breakpoints of the free coordinates, activating every
    bound crossed; ``grad`` must be Q x + q at entry.  Mutates x and W,
    returns (x, n_activated).  ``Qcol`` yields columns of Q.
    """
    n = len(x)
    d = np.zeros(n)
    d[free] = p
    hits = np.full(n, np.inf)
    pos = free[p > 0]
    neg = free[p < 0]
    hits[pos] = (ub[pos] - x[pos]) / d[pos]
    hits[neg] = (lb[neg] - x[neg]) / d[neg]
    order = np.argsort(hits, kind="stable")
    Qd = Qcol.matvec(d)
    g = grad.copy()
    t = 0.0
    kpos = 0
    activated = 0

    def activate_through(limit):
        nonlocal kpos, activated
        while kpos < n and hits[order[kpos]] <= limit:
            i = order[kpos]
            kpos += 1
            if d[i] == 0.0:
                continue
            if d[i] > 0:
                x[i] = ub[i]
                W[i] = 1
            else:
                x[i] = lb[i]
                W[i] = -1
            Qd[:] -= d[i] * Qcol.col(i)
            d[i] = 0.0
            activated += 1

    activate_through(0.0)   # outward directions at already-active bounds
    while t < 1.0 and np.any(d):
        t_next = min(1.0, hits[order[kpos]] if kpos < n else 1.0)
        slope = float(g @ d)
        if slope >= 0.0:
            break
        curv = float(d @ Qd)
        if curv > 0.0:
            tau = -slope / curv
            if t + tau < t_next:
                x += tau * d
                t += tau
                break
        seg = t_next - t
        x += seg * d
        g += seg * Qd
        t = t_next
        if t >= 1.0:
            break
        activate_through(t_next)
    return x, activated


class _ColAccess:
    """Uniform column access and matvec for dense or CSC matrices."""

    def __init__(self, Q):
        self.sparse = sp.issparse(Q)
        self.Q = Q.tocsc() if self.sparse else Q

    def matvec(self, v):
        return self.Q @ v

    def col(self, i):
        if self.sparse:
            return self.Q[:, [i]].toarray().ravel()
        return self.Q[:, i]


def solve_box_qp(Q, q, lb, ub, x0=None, working=None, tol=1e-11,
                 max_iter=None):
    """Minimize 1/2 x'Qx + q'x over a box, Q symmetric positive definite.

    Parameters
    ----------
    x0 : feasible starting point (defaults to the projection of 0).
    working : optional int8 warm-start working set (-1 lower, 0 free,
        +1 upper); entries inconsistent with ``x0`` activity are ignored.
    tol : absolute tolerance on the projected gradient.

    Raises :class:`IndefiniteQP` if a reduced system is not positive definite
    and :class:`QpMaxIterations` on budget exhaustion.
    """
    n = len(q)
    q = np.asarray(q, dtype=float)
    lb = np.asarray(lb, dtype=float)
    ub = np.asarray(ub, dtype=float)
    if x0 is None:
        x = np.clip(np.zeros(n), lb, ub)
    else:
        x = np.clip(np.asarray(x0, dtype=float).copy(), lb, ub)
    if max_iter is None:
        max_iter = 3 * n + 100

    cols = _ColAccess(Q)
    fixed = ub - lb <= 0.0
    W = np.zeros(n, dtype=np.int8)
    W[fixed] = -1
    grad = q + cols.matvec(x)
    if working is not None:
        w = np.asarray(working, dtype=np.int8)
        at_lo = x <= lb
        at_up = x >= ub
        W = np.where((w == -1) & at_lo, -1, W)
        W = np.where((w == 1) & at_up & ~fixed, np.int8(1), W)
    # activate bounds whose multiplier sign is already favourable
    W = np.where((x <= lb) & (grad > 0) & (W == 0), -1, W)
    W = np.where((x >= ub) & (grad < 0) & (W == 0) & ~fixed, np.int8(1), W)

    gscale = 1.0 + float(np.max(np.abs(q))) if n else 1.0
    for it in range(1, max_iter + 1):
        grad = q + cols.matvec(x)
        free = np.flatnonzero(W == 0)
        move = False
        if free.size:
            p_free = _solve_free_block(Q, free, -grad[free])
            move = float(np.max(np.abs(p_free))) > tol * (1.0 + float(np.max(np.abs(x[free]))))
        if not move:
            viol = np.zeros(n)
            lower = (W == -1) & ~fixed
            upper = W == 1
            viol[lower] = np.maximum(0.0, -grad[lower])
            viol[upper] = np.maximum(0.0, grad[upper])
            if n == 0 or float(np.max(viol)) <= tol * gscale:
                return BoxQpResult(x=x, grad=grad, working=W, iterations=it)
            W[viol > tol * gscale] = 0
            continue
        x, _ = _projected_search(cols, x, grad, p_free, free, lb, ub, W)
        x = np.clip(x, lb, ub)
    raise QpMaxIterations(f"box QP did not converge in {max_iter} iterations")
