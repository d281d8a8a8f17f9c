"""Problem representation for programs with vanishing constraints.

An :class:`MpvcProblem` bundles the smooth data of

    min f(x)  s.t.  g(x) = 0,   H_i(x) >= 0,   G_i(x) * H_i(x) >= 0,

over a variable box, where each vanishing constraint ``G_i`` is enforced only
where its controlling constraint ``H_i`` is positive.  The slack reformulation
(:func:`to_vertical_form`) turns every controlling/vanishing pair into a pair
of slack variables coupled to x through equality rows, which is the form the
rest of the package operates on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from ._util import as_csr, as_dense as _dense


class CallbackFailure(RuntimeError):
    """A user callback produced non-finite values."""


class InfeasibleControlling(ValueError):
    """A controlling constraint value is negative beyond the activity tolerance."""


@dataclass(frozen=True)
class MpvcProblem:
    """Smooth problem data with analytic first and second derivatives.

    Callbacks must be deterministic.  ``hess_lag(x, wf, wg, wh, wg2)`` returns
    the weighted Hessian ``wf*f'' + sum_j wg[j]*g_j'' + sum_i wh[i]*H_i''
    + sum_i wg2[i]*G_i''`` (dense or sparse); per-constraint Hessians are never
    materialised individually.  Bounds may contain ``+-inf``.
    """

    n: int
    m: int
    l: int
    f: Callable[[np.ndarray], float]
    grad_f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    jac_g: Callable[[np.ndarray], object]
    H: Callable[[np.ndarray], np.ndarray]
    jac_H: Callable[[np.ndarray], object]
    G: Callable[[np.ndarray], np.ndarray]
    jac_G: Callable[[np.ndarray], object]
    hess_lag: Callable[..., object]
    x_l: np.ndarray = None
    x_u: np.ndarray = None
    name: str = ""

    def __post_init__(self):
        lo = np.full(self.n, -np.inf) if self.x_l is None else np.asarray(self.x_l, dtype=float)
        hi = np.full(self.n, np.inf) if self.x_u is None else np.asarray(self.x_u, dtype=float)
        if lo.shape != (self.n,) or hi.shape != (self.n,):
            raise ValueError("bound shapes do not match n")
        if np.any(lo > hi):
            raise ValueError("x_l must not exceed x_u")
        object.__setattr__(self, "x_l", lo)
        object.__setattr__(self, "x_u", hi)


@dataclass(frozen=True)
class VerticalForm:
    """Slack reformulation of an :class:`MpvcProblem`.

    Slack layout: ``s[2i]`` carries ``H_i`` (controlling), ``s[2i+1]`` carries
    ``G_i`` (vanishing).  Constraint rows follow the same interleaving after
    the ``m`` equality rows, so the slack block of the Jacobian is ``-I``.
    """

    base: MpvcProblem
    idx_cc: np.ndarray
    idx_vc: np.ndarray
    s_l: np.ndarray
    s_u: np.ndarray

    @property
    def n(self) -> int:
        return self.base.n

    @property
    def m(self) -> int:
        return self.base.m

    @property
    def l(self) -> int:
        return self.base.l

    @property
    def n_slack(self) -> int:
        return 2 * self.base.l

    @property
    def n_rows(self) -> int:
        return self.base.m + 2 * self.base.l

    def row_cc(self, i: int) -> int:
        return self.base.m + 2 * i

    def row_vc(self, i: int) -> int:
        return self.base.m + 2 * i + 1


@dataclass(frozen=True)
class IndexSets:
    """Partition of {0, .., l-1} by controlling/vanishing activity."""

    i00: tuple = ()
    i0p: tuple = ()
    i0m: tuple = ()
    ip0: tuple = ()
    ipp: tuple = ()
    tol_active: float | np.ndarray = 0.0

    @property
    def i0(self) -> tuple:
        return tuple(sorted(self.i00 + self.i0p + self.i0m))

    @property
    def iplus(self) -> tuple:
        return tuple(sorted(self.ip0 + self.ipp))


def to_vertical_form(problem: MpvcProblem) -> VerticalForm:
    """Attach slack variables to each controlling/vanishing pair.

    Default slack bounds: controlling slacks live in [0, +inf), vanishing
    slacks are unbounded.  The combined constraint has m + 2l rows.
    """
    l = problem.l
    idx_cc = 2 * np.arange(l)
    idx_vc = 2 * np.arange(l) + 1
    s_l = np.full(2 * l, -np.inf)
    s_l[idx_cc] = 0.0
    s_u = np.full(2 * l, np.inf)
    return VerticalForm(base=problem, idx_cc=idx_cc, idx_vc=idx_vc, s_l=s_l, s_u=s_u)


def default_activity_tol(hvals, gvals) -> np.ndarray:
    """Per-component activity tolerance 1e-8 * (1 + |H_i| + |G_i|)."""
    return 1e-8 * (1.0 + np.abs(hvals) + np.abs(gvals))


def classify_indices(hvals, gvals, tol_active) -> IndexSets:
    """Partition pair indices by the signs of (H_i, G_i) at a point.

    Raises :class:`InfeasibleControlling` when some H_i < -tol.
    """
    h = np.asarray(hvals, dtype=float)
    g = np.asarray(gvals, dtype=float)
    tol = np.broadcast_to(np.asarray(tol_active, dtype=float), h.shape)
    if np.any(tol < 0):
        raise ValueError("tol_active must be nonnegative")
    if np.any(h < -tol):
        bad = int(np.argmax(h < -tol))
        raise InfeasibleControlling(
            f"controlling value H[{bad}] = {h[bad]:.6g} below -tol"
        )
    h0 = np.abs(h) <= tol
    g0 = np.abs(g) <= tol
    i00, i0p, i0m, ip0, ipp = [], [], [], [], []
    for i in range(h.size):
        if h0[i]:
            if g0[i]:
                i00.append(i)
            elif g[i] > 0:
                i0p.append(i)
            else:
                i0m.append(i)
        else:
            if g0[i]:
                ip0.append(i)
            else:
                ipp.append(i)
    return IndexSets(
        i00=tuple(i00), i0p=tuple(i0p), i0m=tuple(i0m),
        ip0=tuple(ip0), ipp=tuple(ipp), tol_active=tol_active,
    )


def eval_vertical(vf: VerticalForm, x, s):
    """Evaluate the combined constraint c(x, s) and its sparse Jacobian.

    Rows: the m equality rows of g, then per pair i the rows
    ``H_i(x) - s[2i]`` and ``G_i(x) - s[2i+1]``.  The Jacobian is CSR with
    columns ordered (x, s); the slack block is minus the identity.
    """
    p = vf.base
    x = np.asarray(x, dtype=float)
    s = np.asarray(s, dtype=float)
    if x.shape != (p.n,) or s.shape != (2 * p.l,):
        raise ValueError("dimension mismatch in eval_vertical")
    gx = np.asarray(p.g(x), dtype=float).reshape(p.m)
    hx = np.asarray(p.H(x), dtype=float).reshape(p.l)
    Gx = np.asarray(p.G(x), dtype=float).reshape(p.l)
    c = np.empty(vf.n_rows)
    c[: p.m] = gx
    c[p.m + vf.idx_cc] = hx - s[vf.idx_cc]
    c[p.m + vf.idx_vc] = Gx - s[vf.idx_vc]
    if not np.all(np.isfinite(c)):
        raise CallbackFailure("constraint callback returned non-finite values")

    if vf.n_rows * (p.n + 2 * p.l) <= 40000:
        # small problems: assemble densely, convert once
        Jd = np.zeros((vf.n_rows, p.n + 2 * p.l))
        if p.m:
            Jd[: p.m, : p.n] = _dense(p.jac_g(x))
        if p.l:
            Jd[p.m + vf.idx_cc, : p.n] = _dense(p.jac_H(x))
            Jd[p.m + vf.idx_vc, : p.n] = _dense(p.jac_G(x))
            Jd[p.m + np.arange(2 * p.l), p.n + np.arange(2 * p.l)] = -1.0
        if not np.all(np.isfinite(Jd)):
            raise CallbackFailure("Jacobian callback returned non-finite values")
        return c, as_csr(Jd)

    Jg = as_csr(p.jac_g(x)) if p.m else sp.csr_matrix((0, p.n))
    Jh = as_csr(p.jac_H(x)) if p.l else sp.csr_matrix((0, p.n))
    JG = as_csr(p.jac_G(x)) if p.l else sp.csr_matrix((0, p.n))
    if not (np.all(np.isfinite(Jg.data)) and np.all(np.isfinite(Jh.data))
            and np.all(np.isfinite(JG.data))):
        raise CallbackFailure("Jacobian callback returned non-finite values")

    # interleave the H/G rows to mirror the slack layout
    order = np.empty(vf.n_rows, dtype=int)
    order[: p.m] = np.arange(p.m)
    order[p.m + vf.idx_cc] = p.m + np.arange(p.l)
    order[p.m + vf.idx_vc] = p.m + p.l + np.arange(p.l)
    Jx = sp.vstack([Jg, Jh, JG], format="csr")[order]
    Js = sp.vstack(
        [sp.csr_matrix((p.m, 2 * p.l)), -sp.identity(2 * p.l, format="csr")],
        format="csr",
    )
    J = as_csr(sp.hstack([Jx, Js], format="csr"))
    return c, J
