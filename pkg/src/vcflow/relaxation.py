"""Smoothing/relaxation baseline for the truss family.

Replaces each vanishing constraint by the smoothed product condition
``phi_t(a_i, sigma_max^2 - sigma_il^2) >= -t`` for a relaxation parameter
``t > 0`` and solves the resulting plain NLP once per ``t`` (no homotopy,
cold start from the shared initial point).  A run is only reported as
``solved`` when the KKT residual meets the tolerance; everything else is a
DNF, mirroring how such baselines are usually tabulated.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ._util import as_csr
from .instances import TrussGroundStructure, initial_point, stress
from .subnlp import EqualityBoxNlp, SubStatus, solve_equality_box_nlp


def phi(w, v, t):
    """Smoothed product: tends to w*v for w, v >= 0 as t -> 0."""
    w = np.asarray(w, dtype=float)
    v = np.asarray(v, dtype=float)
    r1 = np.sqrt(w * w * v * v + t * t)
    r2 = np.sqrt(v * v + t * t)
    return 0.5 * (w * v + r1 + r2 - v)


def phi_grad(w, v, t):
    """Partial derivatives (d/dw, d/dv) of :func:`phi`; requires t > 0."""
    w = np.asarray(w, dtype=float)
    v = np.asarray(v, dtype=float)
    r1 = np.sqrt(w * w * v * v + t * t)
    r2 = np.sqrt(v * v + t * t)
    dw = 0.5 * (v + w * v * v / r1)
    dv = 0.5 * (w + w * w * v / r1 + v / r2 - 1.0)
    return dw, dv


def phi_hess(w, v, t):
    """Second derivatives (d2/dw2, d2/dwdv, d2/dv2) of :func:`phi`, t > 0."""
    w = np.asarray(w, dtype=float)
    v = np.asarray(v, dtype=float)
    r1 = np.sqrt(w * w * v * v + t * t)
    r2 = np.sqrt(v * v + t * t)
    dww = 0.5 * v * v * t * t / r1 ** 3
    dwv = 0.5 * (1.0 + w * v * (2.0 * r1 * r1 - w * w * v * v) / r1 ** 3)
    dvv = 0.5 * (w * w * t * t / r1 ** 3 + t * t / r2 ** 3)
    return dww, dwv, dvv


@dataclass(frozen=True)
class RelaxedInstance:
    """Relaxed truss NLP for one value of the relaxation parameter."""

    gs: TrussGroundStructure
    t: float
    nlp: EqualityBoxNlp
    z0: np.ndarray

    @property
    def n_bars(self) -> int:
        return self.gs.n_bars


@dataclass
class RelaxResult:
    instance: str
    t: float
    status: str                  # "solved" | "dnf"
    reason: str
    volume: float
    iterations: int
    kkt_residual: float
    feasibility: float
    a: np.ndarray
    u: np.ndarray
    wall_time: float


def build_relaxed(gs: TrussGroundStructure, t: float) -> RelaxedInstance:
    """Assemble the relaxed NLP with bounded slacks for all inequalities.

    Variables (a, u, q_c, q_r): compliance rows become equalities with slack
    q_c >= 0 and the relaxed rows become ``phi_t + t - q_r = 0`` with
    q_r >= 0.
    """
    if not t > 0.0:
        raise ValueError("relaxation parameter t must be positive")
    N, d, L = gs.n_bars, gs.n_free_dofs, gs.n_load_cases
    n = N + L * d + L + N * L
    r = L * d + L + N * L
    E, lengths = gs.E, gs.lengths
    gamma = gs.gamma
    ell_w = E / lengths
    smax2 = gs.sigma_max ** 2

    def split(z):
        a = z[:N]
        u = z[N:N + L * d].reshape(L, d)
        q_c = z[N + L * d:N + L * d + L]
        q_r = z[N + L * d + L:].reshape(L, N)
        return a, u, q_c, q_r

    def fobj(z):
        return float(lengths @ z[:N])

    grad_const = np.concatenate([lengths, np.zeros(n - N)])

    def grad_f(z):
        return grad_const.copy()

    def cons(z):
        a, u, q_c, q_r = split(z)
        rows = []
        for li in range(L):
            K_u = gamma.T @ (a * ell_w * (gamma @ u[li]))
            rows.append(K_u - gs.loads[li])
        comp = np.array([gs.loads[li] @ u[li] + q_c[li] - gs.c_max
                         for li in range(L)])
        rel = []
        for li in range(L):
            sig = stress(gs, a, u[li])
            rel.append(phi(a, smax2 - sig ** 2, t) + t - q_r[li])
        return np.concatenate(rows + [comp] + rel)

    def jac(z):
        a, u, q_c, q_r = split(z)
        blocks = []
        for li in range(L):
            gu = gamma @ u[li]
            da = gamma.T @ sp.diags(ell_w * gu)
            K = gamma.T @ sp.diags(a * ell_w) @ gamma
            row = [da] + [K if lj == li else sp.csr_matrix((d, d))
                          for lj in range(L)]
            row.append(sp.csr_matrix((d, L + N * L)))
            blocks.append(sp.hstack(row, format="csr"))
        comp_rows = []
        for li in range(L):
            row = [sp.csr_matrix((1, N))]
            for lj in range(L):
                row.append(sp.csr_matrix(gs.loads[li][None, :])
                           if lj == li else sp.csr_matrix((1, d)))
            ec = np.zeros((1, L))
            ec[0, li] = 1.0
            row.append(sp.csr_matrix(ec))
            row.append(sp.csr_matrix((1, N * L)))
            comp_rows.append(sp.hstack(row, format="csr"))
        rel_rows = []
        for li in range(L):
            sig = stress(gs, a, u[li])
            v = smax2 - sig ** 2
            dw, dv = phi_grad(a, v, t)
            da = sp.diags(dw)
            du = sp.diags(dv * (-2.0 * sig) * ell_w) @ gamma
            row = [da] + [du if lj == li else sp.csr_matrix((N, d))
                          for lj in range(L)]
            row.append(sp.csr_matrix((N, L)))
            dq = sp.csr_matrix(
                (-np.ones(N), (np.arange(N), li * N + np.arange(N))),
                shape=(N, N * L))
            row.append(dq)
            rel_rows.append(sp.hstack(row, format="csr"))
        return as_csr(sp.vstack(blocks + comp_rows + rel_rows, format="csr"))

    def hess_lag(z, wf, wc):
        a, u, q_c, q_r = split(z)
        rows_i, cols_i, vals = [], [], []
        for li in range(L):
            w_eq = np.asarray(wc[li * d:(li + 1) * d], dtype=float)
            cross = sp.diags(ell_w * (gamma @ w_eq)) @ gamma
            off = N + li * d
            coo = as_csr(cross).tocoo()
            rows_i.extend(coo.row); cols_i.extend(off + coo.col)
            vals.extend(coo.data)
            rows_i.extend(off + coo.col); cols_i.extend(coo.row)
            vals.extend(coo.data)
        base = L * d + L
        for li in range(L):
            wr = np.asarray(wc[base + li * N: base + (li + 1) * N], dtype=float)
            sig = stress(gs, a, u[li])
            v = smax2 - sig ** 2
            _, dv = phi_grad(a, v, t)
            dww, dwv, dvv = phi_hess(a, v, t)
            off = N + li * d
            # a-a block: diagonal
            rows_i.extend(range(N)); cols_i.extend(range(N))
            vals.extend(wr * dww)
            # a-u cross: wr_i * dwv_i * (-2 sig_i) * (E/l_i) gamma_i
            cross = sp.diags(wr * dwv * (-2.0 * sig) * ell_w) @ gamma
            coo = as_csr(cross).tocoo()
            rows_i.extend(coo.row); cols_i.extend(off + coo.col)
            vals.extend(coo.data)
            rows_i.extend(off + coo.col); cols_i.extend(coo.row)
            vals.extend(coo.data)
            # u-u block: gamma' diag(w*(dvv*4 sig^2 - 2 dv)*(E/l)^2) gamma
            duu = wr * (dvv * 4.0 * sig ** 2 - 2.0 * dv) * ell_w ** 2
            blk = (gamma.T @ sp.diags(duu) @ gamma).tocoo()
            rows_i.extend(off + blk.row); cols_i.extend(off + blk.col)
            vals.extend(blk.data)
        return as_csr(sp.csr_matrix((vals, (rows_i, cols_i)), shape=(n, n)))

    lb = np.concatenate([np.zeros(N), np.full(L * d, -np.inf), np.zeros(L),
                         np.zeros(N * L)])
    ub = np.concatenate([np.full(N, gs.a_max), np.full(L * d, np.inf),
                         np.full(L, np.inf), np.full(N * L, np.inf)])
    nlp = EqualityBoxNlp(n=n, r=r, f=fobj, grad_f=grad_f, c=cons, jac_c=jac,
                         hess_lag=hess_lag, lb=lb, ub=ub)

    a0, u0, _ = initial_point(gs)
    q_c0 = np.array([gs.c_max - gs.loads[li] @ u0[li] for li in range(L)])
    q_r0 = []
    for li in range(L):
        sig0 = stress(gs, a0, u0[li])
        q_r0.append(phi(a0, smax2 - sig0 ** 2, t) + t)
    z0 = np.concatenate([a0, u0.ravel(), np.maximum(q_c0, 0.0),
                         np.maximum(np.concatenate(q_r0), 0.0)])
    return RelaxedInstance(gs=gs, t=float(t), nlp=nlp, z0=z0)


def solve_relaxed(gs: TrussGroundStructure, t: float, tol: float = 1e-8,
                  max_outer: int = 60) -> RelaxResult:
    """Solve the relaxed NLP for one t; non-certified outcomes are DNF."""
    inst = build_relaxed(gs, t)
    t0 = time.perf_counter()
    res = solve_equality_box_nlp(inst.nlp, inst.z0, tol=tol,
                                 max_outer=max_outer)
    wall = time.perf_counter() - t0
    N, d, L = gs.n_bars, gs.n_free_dofs, gs.n_load_cases
    a = res.z[:N]
    u = res.z[N:N + L * d].reshape(L, d)
    solved = res.status is SubStatus.CONVERGED
    return RelaxResult(
        instance=gs.name, t=float(t),
        status="solved" if solved else "dnf",
        reason=res.status.value,
        volume=float(gs.lengths @ a),
        iterations=res.iterations,
        kkt_residual=float(res.kkt_residual),
        feasibility=float(res.feasibility),
        a=a.copy(), u=u.copy(), wall_time=wall,
    )


def t_sweep(gs: TrussGroundStructure, ts, tol: float = 1e-8) -> list:
    """Cold-started relaxation solves for each t, in input order."""
    ts = list(ts)
    if not ts or any(t <= 0 for t in ts):
        raise ValueError("need a nonempty list of positive t values")
    return [solve_relaxed(gs, t, tol=tol) for t in ts]
