"""Benchmark problem generators: the academic program and truss families.

Truss topology design seeks bar cross-sections ``a`` of minimum total volume
subject to elastic equilibrium ``K(a) u = f``, a compliance budget
``f'u <= c``, and a stress bound that applies only to bars that are actually
present; the latter is the vanishing constraint
``(sigma_max^2 - sigma_i(u)^2) * a_i >= 0`` controlled by ``a_i``.

Counting convention for reported sizes (``table_counts``): published size
tables for these instances count the variables (a, u, one compliance slack
per load case, one vanishing slack per bar and load case) and the constraint
rows (equilibrium, compliance, vanishing).  Controlling slacks and their rows
are omitted there because H_il = a_i is itself a variable; our internal
vertical form carries them explicitly, so internal dimensions are larger.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ._util import as_csr
from .model import MpvcProblem

SQRT2 = math.sqrt(2.0)


class InvalidGrid(ValueError):
    """Ground-structure description is unusable (empty, duplicate nodes, ...)."""


class SingularStiffness(RuntimeError):
    """K(1) is numerically singular; the initial point is undefined."""


def academic() -> MpvcProblem:
    """Two-variable program with an isolated global minimum.

    minimize 4*x1 + 2*x2 with controlling constraints (x1, x2) and vanishing
    constraints (x1 + x2 - 5*sqrt(2), x1 + x2 - 5).  Global minimum (0, 0)
    with objective 0; local minimum (0, 5) with objective 10.
    """
    jac_h = sp.identity(2, format="csr")
    jac_g_rows = sp.csr_matrix(np.ones((2, 2)))
    zero2 = sp.csr_matrix((2, 2))

    return MpvcProblem(
        n=2, m=0, l=2,
        f=lambda x: 4.0 * x[0] + 2.0 * x[1],
        grad_f=lambda x: np.array([4.0, 2.0]),
        g=lambda x: np.zeros(0),
        jac_g=lambda x: sp.csr_matrix((0, 2)),
        H=lambda x: np.array([x[0], x[1]]),
        jac_H=lambda x: jac_h,
        G=lambda x: np.array([x[0] + x[1] - 5.0 * SQRT2, x[0] + x[1] - 5.0]),
        jac_G=lambda x: jac_g_rows,
        hess_lag=lambda x, wf, wg, wh, wG: zero2,
        name="academic",
    )


@dataclass(frozen=True)
class TrussGroundStructure:
    """Candidate bars between grid nodes, with loads and design parameters."""

    nodes: np.ndarray          # (K, 2) coordinates
    fixed_nodes: tuple         # node indices attached to ground
    bars: np.ndarray           # (N, 2) node index pairs
    lengths: np.ndarray        # (N,)
    gamma: sp.csr_matrix       # (N, d) direction cosines on free dofs
    loads: np.ndarray          # (L, d), each row unit 2-norm
    a_max: float
    c_max: float
    sigma_max: float
    name: str = ""
    E: float = 1.0

    @property
    def n_bars(self) -> int:
        return len(self.bars)

    @property
    def n_free_dofs(self) -> int:
        return self.gamma.shape[1]

    @property
    def n_load_cases(self) -> int:
        return len(self.loads)

    def free_dof_index(self) -> dict:
        """Map (node, axis) -> dof column for free nodes, in node order."""
        fixed = set(self.fixed_nodes)
        out = {}
        dof = 0
        for i in range(len(self.nodes)):
            if i in fixed:
                continue
            out[(i, 0)] = dof
            out[(i, 1)] = dof + 1
            dof += 2
        return out


def _overlapping(di: int, dj: int) -> bool:
    return math.gcd(abs(di), abs(dj)) != 1


def generate_ground_structure(nodes, fixed_set, load_spec, a_max, c_max,
                              sigma_max, name="") -> TrussGroundStructure:
    """Assemble a ground structure on integer nodes.

    Bars connect every pair of nodes except bars overlapping a shorter
    collinear one (gcd of the coordinate difference != 1) and pairs of fixed
    nodes (no free dof, structurally void).  ``load_spec`` is a list of load
    cases, each a list of (node, fx, fy); loads are normalized to unit 2-norm.
    """
    nodes = np.asarray(nodes, dtype=float)
    if nodes.ndim != 2 or nodes.shape[1] != 2 or len(nodes) < 2:
        raise InvalidGrid("need at least two planar nodes")
    if len({(float(x), float(y)) for x, y in nodes}) != len(nodes):
        raise InvalidGrid("duplicate nodes")
    fixed = tuple(sorted(set(int(i) for i in fixed_set)))
    if not fixed:
        raise InvalidGrid("fixed node set must be nonempty")
    if not np.allclose(nodes, np.round(nodes)):
        raise InvalidGrid("grid nodes must have integer coordinates")

    coords = np.round(nodes).astype(int)
    fixed_mask = np.zeros(len(nodes), dtype=bool)
    fixed_mask[list(fixed)] = True
    bars = []
    for i in range(len(nodes)):
        for j in range(i + 1, len(nodes)):
            if fixed_mask[i] and fixed_mask[j]:
                continue
            di = coords[j, 0] - coords[i, 0]
            dj = coords[j, 1] - coords[i, 1]
            if _overlapping(di, dj):
                continue
            bars.append((i, j))
    bars = np.asarray(bars, dtype=int)
    if len(bars) == 0:
        raise InvalidGrid("no admissible bars")

    dof = {}
    col = 0
    for i in range(len(nodes)):
        if fixed_mask[i]:
            continue
        dof[(i, 0)] = col
        dof[(i, 1)] = col + 1
        col += 2
    d = col

    lengths = np.linalg.norm(nodes[bars[:, 1]] - nodes[bars[:, 0]], axis=1)
    rows, cols, vals = [], [], []
    for b, (i, j) in enumerate(bars):
        e = (nodes[j] - nodes[i]) / lengths[b]
        for node, sign in ((i, -1.0), (j, 1.0)):
            for axis in range(2):
                if (node, axis) in dof:
                    rows.append(b)
                    cols.append(dof[(node, axis)])
                    vals.append(sign * e[axis])
    gamma = sp.csr_matrix((vals, (rows, cols)), shape=(len(bars), d))

    loads = np.zeros((len(load_spec), d))
    for li, case in enumerate(load_spec):
        for node, fx, fy in case:
            node = int(node)
            if (node, 0) not in dof:
                raise InvalidGrid(f"load applied to fixed node {node}")
            loads[li, dof[(node, 0)]] += fx
            loads[li, dof[(node, 1)]] += fy
        nrm = np.linalg.norm(loads[li])
        if nrm == 0.0:
            raise InvalidGrid("zero load case")
        loads[li] /= nrm

    return TrussGroundStructure(
        nodes=nodes, fixed_nodes=fixed, bars=bars, lengths=lengths,
        gamma=as_csr(gamma), loads=loads, a_max=float(a_max),
        c_max=float(c_max), sigma_max=float(sigma_max), name=name,
    )


def stiffness_matrix(gs: TrussGroundStructure, a) -> sp.csr_matrix:
    """Global stiffness K(a) = sum_i a_i (E/l_i) gamma_i gamma_i'."""
    a = np.asarray(a, dtype=float)
    w = a * gs.E / gs.lengths
    return as_csr(gs.gamma.T @ sp.diags(w) @ gs.gamma)


def stress(gs: TrussGroundStructure, a, u) -> np.ndarray:
    """Axial stresses sigma_i = E * gamma_i' u / l_i (independent of a)."""
    u = np.asarray(u, dtype=float)
    return gs.E * (gs.gamma @ u) / gs.lengths


def table_counts(gs: TrussGroundStructure) -> dict:
    """Problem sizes in the published counting convention (see module doc)."""
    N, d, L = gs.n_bars, gs.n_free_dofs, gs.n_load_cases
    return {
        "vars": N + L * d + L + N * L,
        "cons": L * d + L + N * L,
        "vc": N * L,
    }


def build_truss_mpvc(gs: TrussGroundStructure) -> MpvcProblem:
    """Vanishing-constraint program for a ground structure.

    Variables x = (a, u_1, .., u_L, q) with one compliance slack q_l >= 0 per
    load case.  Equalities: K(a) u_l - f_l = 0 and f_l'u_l + q_l - c = 0.
    Controlling constraints H_il = a_i; vanishing constraints
    G_il = sigma_max^2 - sigma_il^2.
    """
    N, d, L = gs.n_bars, gs.n_free_dofs, gs.n_load_cases
    n = N + L * d + L
    m = L * d + L
    l = N * L
    E, lengths = gs.E, gs.lengths
    gamma = gs.gamma
    ell_w = E / lengths
    volume_grad = np.concatenate([lengths, np.zeros(L * d + L)])

    def split(x):
        a = x[:N]
        u = x[N:N + L * d].reshape(L, d)
        q = x[N + L * d:]
        return a, u, q

    def f(x):
        return float(lengths @ x[:N])

    def grad_f(x):
        return volume_grad.copy()

    def g(x):
        a, u, q = split(x)
        K = stiffness_matrix(gs, a)
        rows = [K @ u[li] - gs.loads[li] for li in range(L)]
        comp = np.array([gs.loads[li] @ u[li] + q[li] - gs.c_max for li in range(L)])
        return np.concatenate(rows + [comp])

    def jac_g(x):
        a, u, q = split(x)
        K = stiffness_matrix(gs, a)
        blocks = []
        for li in range(L):
            # d/da_i (K(a) u)_j = (E/l_i) (gamma_i' u) gamma_ij
            da = gamma.T @ sp.diags(ell_w * (gamma @ u[li]))
            du = [K if lj == li else sp.csr_matrix((d, d)) for lj in range(L)]
            row = sp.hstack([da] + du + [sp.csr_matrix((d, L))], format="csr")
            blocks.append(row)
        comp = sp.hstack(
            [sp.csr_matrix((L, N))]
            + [sp.csr_matrix(gs.loads[li][None, :] * np.eye(L)[:, [li]])
               for li in range(L)]
            + [sp.identity(L, format="csr")],
            format="csr",
        )
        return as_csr(sp.vstack(blocks + [comp], format="csr"))

    def H(x):
        return np.tile(x[:N], L)

    def jac_H(x):
        eye = sp.identity(N, format="csr")
        return as_csr(sp.hstack(
            [sp.vstack([eye] * L, format="csr"),
             sp.csr_matrix((N * L, L * d + L))], format="csr"))

    def G(x):
        a, u, q = split(x)
        sig = np.concatenate([stress(gs, a, u[li]) for li in range(L)])
        return gs.sigma_max ** 2 - sig ** 2

    def jac_G(x):
        a, u, q = split(x)
        blocks = []
        for li in range(L):
            sig = stress(gs, a, u[li])
            du = sp.diags(-2.0 * sig * ell_w) @ gamma
            row = sp.hstack(
                [sp.csr_matrix((N, N))]
                + [du if lj == li else sp.csr_matrix((N, d)) for lj in range(L)]
                + [sp.csr_matrix((N, L))], format="csr")
            blocks.append(row)
        return as_csr(sp.vstack(blocks, format="csr"))

    def hess_lag(x, wf, wg, wh, wG):
        a, u, q = split(x)
        rows, cols, vals = [], [], []
        out = sp.csr_matrix((n, n))
        parts = []
        for li in range(L):
            w_eq = np.asarray(wg[li * d:(li + 1) * d], dtype=float)
            # cross term: d^2/da_i du (w' K(a) u) = (E/l_i)(gamma_i' w) gamma_i
            cross = sp.diags(ell_w * (gamma @ w_eq)) @ gamma  # (N, d)
            off = N + li * d
            parts.append((cross, off))
        for cross, off in parts:
            cross = as_csr(cross)
            coo = cross.tocoo()
            rows.extend(coo.row)
            cols.extend(off + coo.col)
            vals.extend(coo.data)
            rows.extend(off + coo.col)
            cols.extend(coo.row)
            vals.extend(coo.data)
        for li in range(L):
            wG_l = np.asarray(wG[li * N:(li + 1) * N], dtype=float)
            sig_w = -2.0 * wG_l * ell_w ** 2  # d^2 G/du^2 = -2 (E/l)^2 gamma gamma'
            blk = (gamma.T @ sp.diags(sig_w) @ gamma).tocoo()
            off = N + li * d
            rows.extend(off + blk.row)
            cols.extend(off + blk.col)
            vals.extend(blk.data)
        out = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        return as_csr(out)

    x_l = np.concatenate([np.zeros(N), np.full(L * d, -np.inf), np.zeros(L)])
    x_u = np.concatenate([np.full(N, gs.a_max), np.full(L * d, np.inf),
                          np.full(L, np.inf)])
    return MpvcProblem(
        n=n, m=m, l=l, f=f, grad_f=grad_f, g=g, jac_g=jac_g, H=H, jac_H=jac_H,
        G=G, jac_G=jac_G, hess_lag=hess_lag, x_l=x_l, x_u=x_u,
        name=gs.name or "truss",
    )


def initial_point(gs: TrussGroundStructure):
    """Uniform-section starting point strictly inside the upper branch.

    Chooses alpha so that a = alpha, u_l = K(1)^{-1} f_l / alpha satisfies
    equilibrium, the compliance budget, and |sigma| <= sigma_max.  The stress
    condition is applied to the absolute stress value.
    """
    K1 = stiffness_matrix(gs, np.ones(gs.n_bars)).toarray()
    try:
        v = np.linalg.solve(K1, gs.loads.T).T  # (L, d)
    except np.linalg.LinAlgError as exc:
        raise SingularStiffness(str(exc)) from exc
    if not np.all(np.isfinite(v)):
        raise SingularStiffness("K(1) solve produced non-finite values")
    alpha = 0.0
    for li in range(gs.n_load_cases):
        alpha = max(alpha, float(gs.loads[li] @ v[li]) / gs.c_max)
        sig = np.abs(stress(gs, None, v[li]))
        alpha = max(alpha, float(np.max(sig)) / gs.sigma_max)
    if alpha <= 0.0:
        raise SingularStiffness("load produces no displacement")
    a0 = np.full(gs.n_bars, alpha)
    u0 = v / alpha
    return a0, u0, alpha


def initial_x(gs: TrussGroundStructure) -> np.ndarray:
    """Initial MPVC variable vector (a, u, compliance slacks)."""
    a0, u0, _ = initial_point(gs)
    q0 = np.array([gs.c_max - gs.loads[li] @ u0[li]
                   for li in range(gs.n_load_cases)])
    return np.concatenate([a0, u0.ravel(), np.maximum(q0, 0.0)])


def estimate_initial_duals(gs: TrussGroundStructure, vf, x0) -> np.ndarray:
    """Dual start minimizing the branch-NLP KKT residual at a primal point.

    Determines the signature compatible with ``x0``, stacks the reduced
    constraint Jacobian with identity columns for the active variable bounds
    (sign-constrained according to which bound is active, zero otherwise),
    and solves the resulting sign-constrained least-squares problem.  Returns
    the equality-dual part scattered to the full dual vector.
    """
    from .branch import build_reduced_layout, initialize_branches, piece_bounds
    from .subnlp import assemble, solve_sign_constrained_lsq

    x0 = np.asarray(x0, dtype=float)
    s0, sigma = initialize_branches(vf, x0)
    layout = build_reduced_layout(vf, sigma)
    sub = assemble(vf, sigma, x0, s0, np.zeros(vf.n_rows), lam=1.0, rho=0.0)
    s_red = s0[layout.slack_columns()]
    _, J = sub.eval_constraints(x0, s_red)
    grad = np.concatenate([np.asarray(vf.base.grad_f(x0), dtype=float),
                           np.zeros(layout.n_reduced)])

    lb = np.concatenate([vf.base.x_l, sub.s_lo])
    ub = np.concatenate([vf.base.x_u, sub.s_hi])
    z = np.concatenate([x0, s_red])
    tol = 1e-9 * (1.0 + np.abs(z))
    at_lo = z - lb <= tol
    at_up = ub - z <= tol
    active = np.flatnonzero(at_lo | at_up)

    if sp.issparse(J):
        rows = [J, sp.identity(z.size, format="csr")[active]]
        A = sp.vstack(rows, format="csr").toarray()
    else:
        A = np.vstack([J, np.eye(z.size)[active]])
    spec = ["free"] * layout.r
    for i in active:
        if at_lo[i] and at_up[i]:
            spec.append("free")
        elif at_lo[i]:
            spec.append("neg")
        else:
            spec.append("pos")
    y = solve_sign_constrained_lsq(A, grad, spec)
    y_full = np.zeros(vf.n_rows)
    y_full[layout.full_rows()] = y[: layout.r]
    return y_full


def tenbar() -> TrussGroundStructure:
    """Classic ten-bar cantilever on a 3x2 unit grid, unit tip load.

    Nodes: bottom row (0,0), (1,0), (2,0); top row (0,1), (1,1), (2,1); the
    two leftmost nodes are fixed.  The ten members are the standard layout
    (chords, two verticals, four short diagonals).  Parameters
    (a_max, c, sigma_max) = (100, 10, 1).
    """
    nodes = np.array([
        [0.0, 0.0], [1.0, 0.0], [2.0, 0.0],
        [0.0, 1.0], [1.0, 1.0], [2.0, 1.0],
    ])
    fixed = (0, 3)
    bars = np.array([
        (3, 4), (4, 5),      # top chord
        (0, 1), (1, 2),      # bottom chord
        (1, 4), (2, 5),      # verticals
        (3, 1), (4, 2),      # falling diagonals
        (0, 4), (1, 5),      # rising diagonals
    ])
    lengths = np.linalg.norm(nodes[bars[:, 1]] - nodes[bars[:, 0]], axis=1)
    dof = {}
    col = 0
    for i in range(6):
        if i in fixed:
            continue
        dof[(i, 0)] = col
        dof[(i, 1)] = col + 1
        col += 2
    rows, cols, vals = [], [], []
    for b, (i, j) in enumerate(bars):
        e = (nodes[j] - nodes[i]) / lengths[b]
        for node, sign in ((i, -1.0), (j, 1.0)):
            for axis in range(2):
                if (node, axis) in dof:
                    rows.append(b)
                    cols.append(dof[(node, axis)])
                    vals.append(sign * e[axis])
    gamma = sp.csr_matrix((vals, (rows, cols)), shape=(len(bars), col))
    loads = np.zeros((1, col))
    loads[0, dof[(2, 1)]] = -1.0
    return TrussGroundStructure(
        nodes=nodes, fixed_nodes=fixed, bars=bars, lengths=lengths,
        gamma=as_csr(gamma), loads=loads, a_max=100.0, c_max=10.0,
        sigma_max=1.0, name="tenbar",
    )


def cantilever(sigma_max: float = 100.0) -> TrussGroundStructure:
    """Cantilever arm: 27 nodes on a 9x3 grid, leftmost column fixed.

    Unit downward load at the bottom-right node; overlapping bars removed by
    the gcd rule, leaving 224 candidates.  a_max = 1, c = 100.
    """
    nodes = [(x, y) for y in range(3) for x in range(9)]
    fixed = [i for i, (x, y) in enumerate(nodes) if x == 0]
    tip = nodes.index((8, 0))
    return generate_ground_structure(
        nodes, fixed, [[(tip, 0.0, -1.0)]], a_max=1.0, c_max=100.0,
        sigma_max=sigma_max, name="cantilever",
    )


def _hook_shape():
    """Hook-shaped node set: shank, bottom bowl, rising tip.

    Reconstruction on an integer grid: a two-row bowl 13 nodes wide, a
    one-node-wide shank at the left rising to y = 15 (its top two nodes are
    the attachment), and a three-node-wide tip at the right rising to y = 4.
    49 nodes total, 47 free; the gcd rule leaves exactly 661 candidate bars.
    """
    shape = set()
    for x in range(13):
        for y in range(2):
            shape.add((x, y))
    for y in range(2, 16):
        shape.add((0, y))
    for x in range(10, 13):
        for y in range(2, 5):
            shape.add((x, y))
    nodes = sorted(shape)
    fixed = (nodes.index((0, 14)), nodes.index((0, 15)))
    tip = nodes.index((12, 4))
    return nodes, fixed, tip


def hook(sigma_max: float = 100.0) -> TrussGroundStructure:
    """Hook-shaped structure fixed at its top, loaded at the far-right tip.

    Parameters a_max = 100, c = 100; sigma_max selects the benchmark variant.
    """
    nodes, fixed, tip = _hook_shape()
    return generate_ground_structure(
        nodes, fixed, [[(tip, 0.0, -1.0)]], a_max=100.0, c_max=100.0,
        sigma_max=sigma_max, name="hook",
    )
