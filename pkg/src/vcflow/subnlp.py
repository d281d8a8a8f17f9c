"""Proximal-regularized subproblems and the solvers behind them.

The central object is :class:`ProximalSubproblem`: one backward-Euler step of
the primal-dual flow, posed as

    min  f(x) + rho/2 ||ct(x,s)||^2
         + lam * [ 1/2 ||x - xh||_Dx^2 + 1/2 ||s - sh||_Ds^2
                   + 1/2 ||w - yh||_Dy^2 ]
    s.t. ct(x, s) + lam * w = 0,   x and s in their boxes,  w free,

where ``ct`` collects the reduced constraint rows for the current branch
signature.  ``w`` is kept as an explicit variable; eliminating it would make
the subproblem far more nonlinear.  :func:`solve` runs an SQP with exact
Lagrangian Hessian, an inertia-correcting diagonal shift, active-set QP steps
for the boxes, and a backtracking line search on an augmented-Lagrangian
merit function.  Failures are reported, never masked; the flow driver owns
the retry policy.

The module also provides :func:`solve_sign_constrained_lsq` (active-set least
squares with per-coordinate sign constraints, used for dual estimation) and
:func:`solve_equality_box_nlp`, a bound-constrained augmented-Lagrangian
method used by the relaxation baseline.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from ._qp import BoxQpResult, IndefiniteQP, QpMaxIterations, solve_box_qp
from ._util import as_csr, as_dense, gradient_box_residual, project_box
from .branch import ReducedLayout, Signature, build_reduced_layout, piece_bounds
from .model import VerticalForm

_DENSE_LIMIT = 600


class DimensionMismatch(ValueError):
    """Anchor or scaling dimensions inconsistent with the reduced layout."""


class SolverMaxIterations(RuntimeError):
    """An iterative solver exhausted its iteration budget."""


class SubStatus(enum.Enum):
    CONVERGED = "converged"
    MAX_ITERATIONS = "max_iterations"
    LINE_SEARCH_FAILURE = "line_search_failure"


@dataclass
class SubSolution:
    x: np.ndarray
    s_red: np.ndarray
    w: np.ndarray
    kkt_residual: float
    iterations: int
    status: SubStatus
    working: np.ndarray | None = None

    @property
    def converged(self) -> bool:
        return self.status is SubStatus.CONVERGED


@dataclass
class ProximalSubproblem:
    """Assembled backward-Euler subproblem for one branch signature."""

    vf: VerticalForm
    sigma: Signature
    layout: ReducedLayout
    x_hat: np.ndarray
    s_hat: np.ndarray          # reduced coordinates
    y_hat: np.ndarray          # reduced rows
    lam: float
    rho: float
    d_x: np.ndarray
    d_s: np.ndarray            # reduced coordinates
    d_y: np.ndarray            # reduced rows
    x_lo: np.ndarray = field(init=False)
    x_hi: np.ndarray = field(init=False)
    s_lo: np.ndarray = field(init=False)
    s_hi: np.ndarray = field(init=False)

    def __post_init__(self):
        p = self.vf.base
        lay = self.layout
        if self.x_hat.shape != (p.n,):
            raise DimensionMismatch("x anchor has wrong dimension")
        if self.s_hat.shape != (lay.n_reduced,):
            raise DimensionMismatch("reduced slack anchor has wrong dimension")
        if self.y_hat.shape != (lay.r,):
            raise DimensionMismatch("reduced dual anchor has wrong dimension")
        if self.d_x.shape != (p.n,) or self.d_s.shape != (lay.n_reduced,) \
                or self.d_y.shape != (lay.r,):
            raise DimensionMismatch("scaling dimensions inconsistent")
        if not (self.lam > 0.0):
            raise ValueError("lam must be positive")
        if self.rho < 0.0:
            raise ValueError("rho must be nonnegative")
        if np.any(self.d_x <= 0) or np.any(self.d_s <= 0) or np.any(self.d_y <= 0):
            raise ValueError("scalings must be strictly positive")
        bounds = piece_bounds(self.vf, self.sigma)
        cols = lay.slack_columns()
        self.x_lo, self.x_hi = p.x_l, p.x_u
        self.s_lo, self.s_hi = bounds.s_lo[cols], bounds.s_hi[cols]

    @property
    def n(self) -> int:
        return self.vf.base.n

    @property
    def k(self) -> int:
        return self.layout.n_reduced

    @property
    def r(self) -> int:
        return self.layout.r

    @property
    def dense(self) -> bool:
        return self.n + self.k <= _DENSE_LIMIT

    def eval_values(self, x, s_red) -> np.ndarray:
        """Reduced constraint vector only (no Jacobian)."""
        p = self.vf.base
        lay = self.layout
        gx = np.asarray(p.g(x), dtype=float).reshape(p.m)
        hx = np.asarray(p.H(x), dtype=float).reshape(p.l)
        Gx = np.asarray(p.G(x), dtype=float).reshape(p.l)
        kept = np.asarray(lay.kept_vc, dtype=int)
        return np.concatenate([
            gx,
            hx - s_red[: lay.l],
            Gx[kept] - s_red[lay.l:],
        ])

    def eval_constraints(self, x, s_red):
        """Reduced constraint vector and Jacobian over (x, s~).

        Small problems get a dense ndarray Jacobian, large ones CSR.
        """
        p = self.vf.base
        lay = self.layout
        ct = self.eval_values(x, s_red)
        kept = np.asarray(lay.kept_vc, dtype=int)
        if self.dense:
            J = np.zeros((lay.r, self.n + self.k))
            if p.m:
                J[: lay.m, : p.n] = as_dense(p.jac_g(x))
            J[lay.m: lay.m + lay.l, : p.n] = as_dense(p.jac_H(x))
            if kept.size:
                J[lay.m + lay.l:, : p.n] = as_dense(p.jac_G(x))[kept]
            rows = np.arange(lay.m, lay.r)
            J[rows, p.n + np.arange(self.k)] = -1.0
            return ct, J
        Jg = as_csr(p.jac_g(x)) if p.m else sp.csr_matrix((0, p.n))
        Jh = as_csr(p.jac_H(x))
        JG = as_csr(p.jac_G(x))[kept] if kept.size else sp.csr_matrix((0, p.n))
        Jx = sp.vstack([Jg, Jh, JG], format="csr")
        rows = np.concatenate([
            lay.m + np.arange(lay.l),
            lay.m + lay.l + np.arange(kept.size),
        ]).astype(int)
        cols = np.arange(self.k)
        Js = sp.csr_matrix(
            (-np.ones(self.k), (rows, cols)), shape=(lay.r, self.k)
        )
        return ct, as_csr(sp.hstack([Jx, Js], format="csr"))

    def hess_xx(self, x, row_weights):
        """Weighted constraint+objective Hessian over x for given row weights."""
        p = self.vf.base
        lay = self.layout
        wg = row_weights[: lay.m]
        wh = row_weights[lay.m: lay.m + lay.l]
        wG = np.zeros(p.l)
        if lay.kept_vc:
            wG[np.asarray(lay.kept_vc, dtype=int)] = row_weights[lay.m + lay.l:]
        return p.hess_lag(x, 1.0, wg, wh, wG)

    def objective(self, x, s_red, w, ct=None) -> float:
        p = self.vf.base
        if ct is None:
            ct, _ = self.eval_constraints(x, s_red)
        prox = (
            0.5 * float(self.d_x @ (x - self.x_hat) ** 2)
            + 0.5 * float(self.d_s @ (s_red - self.s_hat) ** 2)
            + 0.5 * float(self.d_y @ (w - self.y_hat) ** 2)
        )
        return float(p.f(x)) + 0.5 * self.rho * float(ct @ ct) + self.lam * prox


def assemble(vf: VerticalForm, sigma: Signature, x_hat, s_hat_full, y_hat_full,
             lam: float, rho: float, scaling=None) -> ProximalSubproblem:
    """Build a :class:`ProximalSubproblem` from full-space anchors.

    ``s_hat_full`` (2l) and ``y_hat_full`` (m + 2l) are restricted to the
    reduced coordinates of the signature.  ``scaling`` is an optional triple
    ``(d_x, d_s, d_y)`` of positive diagonal weights in reduced coordinates;
    identity by default.
    """
    layout = build_reduced_layout(vf, sigma)
    x_hat = np.asarray(x_hat, dtype=float)
    s_hat_full = np.asarray(s_hat_full, dtype=float)
    y_hat_full = np.asarray(y_hat_full, dtype=float)
    if s_hat_full.shape != (2 * vf.l,):
        raise DimensionMismatch("full slack anchor has wrong dimension")
    if y_hat_full.shape != (vf.n_rows,):
        raise DimensionMismatch("full dual anchor has wrong dimension")
    s_hat = s_hat_full[layout.slack_columns()]
    y_hat = y_hat_full[layout.full_rows()]
    if scaling is None:
        d_x = np.ones(vf.n)
        d_s = np.ones(layout.n_reduced)
        d_y = np.ones(layout.r)
    else:
        d_x, d_s, d_y = (np.asarray(v, dtype=float) for v in scaling)
    return ProximalSubproblem(
        vf=vf, sigma=sigma, layout=layout, x_hat=x_hat, s_hat=s_hat,
        y_hat=y_hat, lam=float(lam), rho=float(rho),
        d_x=d_x, d_s=d_s, d_y=d_y,
    )


def _assemble_qp(sub: ProximalSubproblem, x, s_red, ct, J, mu, dense: bool,
                 delta: float):
    """Hessian and gradient of the QP in (dx, ds) after eliminating dw."""
    n, k, lam, rho = sub.n, sub.k, sub.lam, sub.rho
    row_w = rho * ct + mu
    Hxx = sub.hess_xx(x, row_w)
    dy = sub.d_y
    prox = np.concatenate([lam * sub.d_x, lam * sub.d_s])
    if dense:
        Jd = as_dense(J)
        Q = np.zeros((n + k, n + k))
        Q[:n, :n] = as_dense(Hxx)
        Q += rho * (Jd.T @ Jd)
        Q += (Jd.T * (dy / lam)) @ Jd
        Q[np.diag_indices_from(Q)] += prox + delta
        return Q
    Hxx = as_csr(Hxx)
    Hfull = sp.bmat(
        [[Hxx, None], [None, sp.csr_matrix((k, k))]], format="csr"
    )
    Q = Hfull + rho * (J.T @ J) + (J.T @ sp.diags(dy / lam) @ J)
    Q = Q + sp.diags(prox + delta)
    return as_csr(Q)


def solve(sub: ProximalSubproblem, tol: float = 1e-9, max_iter: int = 100,
          working=None) -> SubSolution:
    """Solve a proximal subproblem to a KKT point of its boxes and equality.

    On :data:`SubStatus.CONVERGED` the projected Lagrangian gradient and the
    constraint residual ``ct + lam*w`` are below ``tol`` in the infinity norm,
    and the equality multiplier is recoverable as ``Dy * (y_hat - w)``.
    """
    n, k, r = sub.n, sub.k, sub.r
    lam, rho = sub.lam, sub.rho
    lb = np.concatenate([sub.x_lo, sub.s_lo])
    ub = np.concatenate([sub.x_hi, sub.s_hi])
    z = project_box(np.concatenate([sub.x_hat, sub.s_hat]), lb, ub)
    w = np.zeros(r)
    z_hat = np.concatenate([sub.x_hat, sub.s_hat])
    d_prim = np.concatenate([sub.d_x, sub.d_s])
    dy = sub.d_y
    p = sub.vf.base
    dense = sub.dense

    beta = 0.0
    delta = 0.0
    W_qp = np.asarray(working, dtype=np.int8) if working is not None else None
    kkt = np.inf
    it = 0

    def split(zv):
        return zv[:n], zv[n:]

    def merit(zv, wv, beta_val, mu_hat, ct_=None):
        x_, s_ = split(zv)
        if ct_ is None:
            ct_ = sub.eval_values(x_, s_)
        C_ = ct_ + lam * wv
        val = sub.objective(x_, s_, wv, ct=ct_)
        return val + float(mu_hat @ C_) + 0.5 * beta_val * float(C_ @ C_), C_

    for it in range(1, max_iter + 1):
        x, s_red = split(z)
        ct, J = sub.eval_constraints(x, s_red)
        C = ct + lam * w
        mu = dy * (sub.y_hat - w)
        gf = np.concatenate([np.asarray(p.grad_f(x), dtype=float), np.zeros(k)])
        grad_phi = gf + rho * (J.T @ ct) + lam * d_prim * (z - z_hat)
        grad_L = grad_phi + J.T @ mu
        stat = float(np.max(gradient_box_residual(grad_L, z, lb, ub))) if n + k else 0.0
        feas = float(np.max(np.abs(C))) if r else 0.0
        kkt = max(stat, feas)
        if kkt <= tol:
            return SubSolution(
                x=x.copy(), s_red=s_red.copy(), w=w.copy(),
                kkt_residual=kkt, iterations=it - 1,
                status=SubStatus.CONVERGED, working=W_qp,
            )

        q_lin = grad_phi + J.T @ (dy * (ct / lam + sub.y_hat))
        delta *= 0.25
        d = None
        for _ in range(25):
            Q = _assemble_qp(sub, x, s_red, ct, J, mu, dense, delta)
            try:
                res = solve_box_qp(Q, q_lin, lb - z, ub - z, working=W_qp)
                d = res.x
                W_qp = res.working
                break
            except (IndefiniteQP, QpMaxIterations):
                scale = float(np.max(np.abs(q_lin))) + 1.0
                delta = max(4.0 * delta, 1e-8 * scale, 1e-12)
        if d is None:
            return SubSolution(
                x=x.copy(), s_red=s_red.copy(), w=w.copy(), kkt_residual=kkt,
                iterations=it, status=SubStatus.LINE_SEARCH_FAILURE,
                working=W_qp,
            )
        d_w = -(C + J @ d) / lam

        g_w = lam * dy * (w - sub.y_hat)
        slope = float(grad_phi @ d + g_w @ d_w - (mu + beta * C) @ C)
        c_sq = float(C @ C)
        if slope > -1e-14 * (1.0 + abs(float(grad_phi @ d))):
            if c_sq > 1e-30:
                beta = max(2.0 * beta,
                           2.0 * float(grad_phi @ d + g_w @ d_w - mu @ C) / c_sq,
                           1.0)
                slope = float(grad_phi @ d + g_w @ d_w - (mu + beta * C) @ C)
            if slope > 0.0:
                slope = -1e-16  # numerically stationary step; accept cautiously

        m0, _ = merit(z, w, beta, mu, ct_=ct)
        alpha = 1.0
        accepted = False
        for _ in range(40):
            try:
                m1, _ = merit(z + alpha * d, w + alpha * d_w, beta, mu)
            except Exception:
                m1 = np.inf
            if np.isfinite(m1) and m1 <= m0 + 1e-4 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            return SubSolution(
                x=x.copy(), s_red=s_red.copy(), w=w.copy(), kkt_residual=kkt,
                iterations=it, status=SubStatus.LINE_SEARCH_FAILURE,
                working=W_qp,
            )
        z = project_box(z + alpha * d, lb, ub)
        w = w + alpha * d_w

    x, s_red = split(z)
    return SubSolution(
        x=x.copy(), s_red=s_red.copy(), w=w.copy(), kkt_residual=kkt,
        iterations=max_iter, status=SubStatus.MAX_ITERATIONS, working=W_qp,
    )


# ---------------------------------------------------------------------------
# sign-constrained least squares
# ---------------------------------------------------------------------------

_SIGN_SPECS = ("free", "neg", "pos", "zero")


def solve_sign_constrained_lsq(J, g0, sign_spec, tol=None, max_iter=None):
    """Minimize ||g0 + J.T @ y||_2 with per-coordinate sign constraints on y.

    ``sign_spec`` assigns each coordinate one of ``free``, ``neg`` (y <= 0),
    ``pos`` (y >= 0) or ``zero``.  Active-set method in the style of
    Lawson-Hanson NNLS; inner least-squares solves use the SVD, so
    rank-deficient systems return the minimum-norm representative.
    """
    J = np.asarray(J, dtype=float) if not sp.issparse(J) else J.toarray()
    g0 = np.asarray(g0, dtype=float)
    p, qdim = J.shape
    if g0.shape != (qdim,):
        raise DimensionMismatch("g0 length must match J columns")
    spec = list(sign_spec)
    if len(spec) != p:
        raise DimensionMismatch("sign_spec length must match J rows")
    for s in spec:
        if s not in _SIGN_SPECS:
            raise ValueError(f"unknown sign spec {s!r}")

    flip = np.array([-1.0 if s == "neg" else 1.0 for s in spec])
    A = J * flip[:, None]          # row-scaled so constrained coords are >= 0
    constrained = np.array([s in ("neg", "pos") for s in spec])
    zero = np.array([s == "zero" for s in spec])
    free = np.array([s == "free" for s in spec])

    if tol is None:
        scale = max(1.0, float(np.max(np.abs(g0))) if qdim else 1.0)
        jmax = float(np.max(np.abs(A))) if A.size else 1.0
        tol = 10.0 * np.finfo(float).eps * max(p, qdim, 1) * scale * max(1.0, jmax)
    if max_iter is None:
        max_iter = 3 * p + 30

    y = np.zeros(p)
    passive = free.copy()

    def lstsq_on(mask):
        yt = np.zeros(p)
        if np.any(mask):
            sol, *_ = np.linalg.lstsq(A[mask].T, -g0, rcond=None)
            yt[mask] = sol
        return yt

    yt = lstsq_on(passive)
    for _ in range(30 * (p + 1)):
        bad = passive & constrained & (yt < -tol)
        if not np.any(bad):
            y = yt
            break
        ratios = y[bad] / (y[bad] - yt[bad])
        alpha = max(0.0, float(np.min(ratios)))
        y = y + alpha * (yt - y)
        drop = passive & constrained & (y <= tol)
        y[drop] = 0.0
        passive[drop] = False
        yt = lstsq_on(passive)
    else:
        raise SolverMaxIterations("sign-constrained LSQ inner loop stalled")

    for _ in range(max_iter):
        resid = g0 + A.T @ y
        grad = A @ resid
        cand = constrained & ~passive & ~zero
        if not np.any(cand):
            break
        idx = np.flatnonzero(cand)
        k = idx[int(np.argmin(grad[idx]))]
        if grad[k] >= -tol:
            break
        passive[k] = True
        yt = lstsq_on(passive)
        for _ in range(30 * (p + 1)):
            bad = passive & constrained & (yt < -tol)
            if not np.any(bad):
                y = yt
                break
            ratios = y[bad] / (y[bad] - yt[bad])
            alpha = max(0.0, float(np.min(ratios)))
            y = y + alpha * (yt - y)
            drop = passive & constrained & (y <= tol)
            y[drop] = 0.0
            passive[drop] = False
            yt = lstsq_on(passive)
        else:
            raise SolverMaxIterations("sign-constrained LSQ inner loop stalled")
    else:
        raise SolverMaxIterations("sign-constrained LSQ did not converge")

    y = y * flip
    y[zero] = 0.0
    return y


# ---------------------------------------------------------------------------
# bound-constrained augmented Lagrangian driver for plain equality/box NLPs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EqualityBoxNlp:
    """Smooth NLP  min f(z) s.t. c(z) = 0, lb <= z <= ub.

    ``hess_lag(z, wf, wc)`` returns ``wf*f'' + sum_k wc[k]*c_k''``.
    """

    n: int
    r: int
    f: Callable
    grad_f: Callable
    c: Callable
    jac_c: Callable
    hess_lag: Callable
    lb: np.ndarray
    ub: np.ndarray


@dataclass
class AlmResult:
    z: np.ndarray
    y: np.ndarray
    kkt_residual: float
    feasibility: float
    iterations: int
    status: SubStatus


def _minimize_al(nlp: EqualityBoxNlp, z, mu, kappa, gtol, max_inner, dense):
    """Newton-type descent on the augmented Lagrangian over the box."""
    delta = 0.0
    W_qp = None
    n_it = 0
    for n_it in range(1, max_inner + 1):
        cval = np.asarray(nlp.c(z), dtype=float)
        J = as_csr(nlp.jac_c(z))
        yk = mu + kappa * cval
        grad = np.asarray(nlp.grad_f(z), dtype=float) + J.T @ yk
        pg = float(np.max(gradient_box_residual(grad, z, nlp.lb, nlp.ub))) \
            if nlp.n else 0.0
        if pg <= gtol:
            return z, n_it - 1, True
        H = nlp.hess_lag(z, 1.0, yk)
        if dense:
            Q = (H.toarray() if sp.issparse(H) else np.asarray(H, dtype=float)).copy()
            Jd = J.toarray()
            Q += kappa * (Jd.T @ Jd)
        else:
            Q = as_csr(H) + kappa * (J.T @ J)
        delta *= 0.25
        d = None
        for _ in range(25):
            if dense:
                Qs = Q.copy()
                Qs[np.diag_indices_from(Qs)] += delta
            else:
                Qs = Q + sp.diags(np.full(nlp.n, delta))
            try:
                res = solve_box_qp(Qs, grad, nlp.lb - z, nlp.ub - z, working=W_qp)
                d = res.x
                W_qp = res.working
                break
            except (IndefiniteQP, QpMaxIterations):
                delta = max(4.0 * delta, 1e-8 * (1.0 + float(np.max(np.abs(grad)))))
        if d is None:
            return z, n_it, False
        slope = float(grad @ d)
        if slope > -1e-16:
            return z, n_it, pg <= 10.0 * gtol

        def al_value(zv):
            cv = np.asarray(nlp.c(zv), dtype=float)
            return float(nlp.f(zv)) + float(mu @ cv) + 0.5 * kappa * float(cv @ cv)

        m0 = al_value(z)
        alpha, ok = 1.0, False
        for _ in range(40):
            zt = project_box(z + alpha * d, nlp.lb, nlp.ub)
            try:
                m1 = al_value(zt)
            except Exception:
                m1 = np.inf
            if np.isfinite(m1) and m1 <= m0 + 1e-4 * alpha * slope:
                z, ok = zt, True
                break
            alpha *= 0.5
        if not ok:
            return z, n_it, False
    return z, max_inner, False


def solve_equality_box_nlp(nlp: EqualityBoxNlp, z0, tol: float = 1e-8,
                           max_outer: int = 60, max_inner: int = 300) -> AlmResult:
    """Classic bound-constrained augmented-Lagrangian method.

    Outer iterations update the multiplier estimate when feasibility improves
    sufficiently and escalate the penalty otherwise; inner iterations run a
    projected Newton descent to a forcing tolerance.
    """
    z = project_box(np.asarray(z0, dtype=float), nlp.lb, nlp.ub)
    mu = np.zeros(nlp.r)
    kappa = 10.0
    eta = kappa ** -0.1
    omega = 1.0 / kappa
    dense = nlp.n <= _DENSE_LIMIT
    total = 0
    stalls = 0
    for _ in range(max_outer):
        z, n_it, inner_ok = _minimize_al(
            nlp, z, mu, kappa, max(omega, 0.1 * tol), max_inner, dense)
        total += n_it
        cval = np.asarray(nlp.c(z), dtype=float)
        J = as_csr(nlp.jac_c(z))
        y = mu + kappa * cval
        grad = np.asarray(nlp.grad_f(z), dtype=float) + J.T @ y
        stat = float(np.max(gradient_box_residual(grad, z, nlp.lb, nlp.ub))) \
            if nlp.n else 0.0
        feas = float(np.max(np.abs(cval))) if nlp.r else 0.0
        if stat <= tol and feas <= tol:
            return AlmResult(z=z, y=y, kkt_residual=max(stat, feas),
                             feasibility=feas, iterations=total,
                             status=SubStatus.CONVERGED)
        if not inner_ok:
            stalls += 1
            if stalls >= 3:
                return AlmResult(z=z, y=y, kkt_residual=max(stat, feas),
                                 feasibility=feas, iterations=total,
                                 status=SubStatus.LINE_SEARCH_FAILURE)
        if feas <= eta:
            mu = y
            eta = max(eta / kappa ** 0.9, 0.01 * tol)
            omega = max(omega / kappa, 0.01 * tol)
        else:
            kappa = min(10.0 * kappa, 1e12)
            eta = kappa ** -0.1
            omega = 1.0 / kappa
    cval = np.asarray(nlp.c(z), dtype=float)
    y = mu + kappa * cval
    feas = float(np.max(np.abs(cval))) if nlp.r else 0.0
    return AlmResult(z=z, y=y, kkt_residual=np.inf, feasibility=feas,
                     iterations=total, status=SubStatus.MAX_ITERATIONS)
