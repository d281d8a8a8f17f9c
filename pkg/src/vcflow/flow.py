"""Sequential-homotopy driver for the piecewise primal-dual flow.

Each outer iteration takes one projected backward-Euler step of the
gradient/anti-gradient flow on the current convex branch by solving a
proximal-regularized subproblem, adapts the step-size parameter ``lam``
(inverse step size) and the augmentation weight ``rho``, re-derives the full
slack/dual state, tests strong stationarity, and switches branches at
bi-active pairs when the test fails.  Equilibria of this process are exactly
the strong stationary points, which :func:`verify_equilibrium` re-checks
case by case before a run is reported as solved.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from ._util import gradient_box_residual, polar_residual, project_box
from .branch import (
    Signature,
    build_reduced_layout,
    detect_switches,
    expand_solution,
    initialize_branches,
    piece_bounds,
)
from .model import (
    IndexSets,
    VerticalForm,
    classify_indices,
    default_activity_tol,
    eval_vertical,
)
from .subnlp import SubStatus, assemble, solve

SCALING_MODES = ("none", "unit", "gradient")


class FlowStatus(enum.Enum):
    CERTIFIED = "certified"
    MAX_OUTER_ITERATIONS = "max_outer_iterations"
    STALLED_LAMBDA = "stalled_lambda"


@dataclass(frozen=True)
class FlowConfig:
    lambda_init: float = 0.1
    lambda_inc: float = 2.1
    rho_init: float = 1e-2
    rho_inc: float = 10.0
    eps: float = 1e-6
    feas_tol: float = 1e-8
    max_outer_iterations: int = 100
    scaling: str = "unit"
    single_flip: bool = False
    lower_branch_init: bool = False
    sub_tol: float = 1e-9
    sub_max_iter: int = 150
    max_lambda_retries: int = 40
    lambda_max: float = 1e14

    def __post_init__(self):
        if not (self.lambda_init > 0 and self.lambda_inc > 1):
            raise ValueError("need lambda_init > 0 and lambda_inc > 1")
        if not (self.rho_init > 0 and self.rho_inc >= 1):
            raise ValueError("need rho_init > 0 and rho_inc >= 1")
        if not (self.eps > 0 and self.feas_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.scaling not in SCALING_MODES:
            raise ValueError(f"scaling must be one of {SCALING_MODES}")


@dataclass
class StationarityReport:
    """Strong-stationarity test at a primal-dual point of the vertical form."""

    residual: float              # scaled norm (primary)
    residual_unscaled: float
    feasibility: float
    eta_H: np.ndarray
    eta_G: np.ndarray
    y_g: np.ndarray
    index_sets: IndexSets
    is_stationary: bool


@dataclass
class TraceRow:
    iteration: int
    lam: float
    rho: float
    sigma: str
    objective: float
    residual: float
    feasibility: float
    sub_iters: int
    switched: bool


@dataclass
class FlowState:
    x: np.ndarray
    s: np.ndarray
    y: np.ndarray
    sigma: Signature
    lam: float
    rho: float
    iteration: int
    last_sub_status: SubStatus | None = None


@dataclass
class FlowResult:
    status: FlowStatus
    state: FlowState
    report: StationarityReport
    trace: list
    objective: float
    outer_iterations: int
    sub_iterations: int
    certified: bool
    equilibrium_cases: list = field(default_factory=list)


def update_lambda(lam: float, success: bool, lambda_inc: float) -> float:
    """Halving-style step-size heuristic: shrink on success, grow on failure."""
    return lam / lambda_inc if success else lam * lambda_inc


def projection_derivative_element(flow_vec, z, lb, ub) -> np.ndarray:
    """Diagonal 0/1 element of the projection derivative along the flow.

    A coordinate passes (1) when strictly inside its bounds or when the flow
    points inward from an active bound; fixed coordinates always block (0).
    """
    z = np.asarray(z, dtype=float)
    v = np.asarray(flow_vec, dtype=float)
    at_lo = z <= lb
    at_up = z >= ub
    inside = ~at_lo & ~at_up
    inward = (at_lo & (v > 0)) | (at_up & (v < 0))
    out = (inside | inward).astype(float)
    out[lb >= ub] = 0.0
    return out


def update_rho(rho: float, rho_inc: float, c, J, grad_lag, pprime) -> float:
    """Increase rho only when that provably stops ||c||^2/2 from growing.

    ``grad_lag`` is the unaugmented Lagrangian gradient over the primal
    coordinates and ``pprime`` the diagonal projection derivative.  The time
    derivative of ||c||^2/2 along the flow is -<d, P' grad_lag> - rho <d, P'd>
    with d = J'c; when it is positive and <d, P'd> > 0 the update picks the
    smallest sufficient rho, capped at rho * rho_inc.
    """
    c = np.asarray(c, dtype=float)
    if c.size == 0 or not np.any(c):
        return rho
    d = J.T @ c
    a = float(d @ (pprime * grad_lag))
    b = float(d @ (pprime * d))
    deriv = -a - rho * b
    if b > 0.0 and deriv > 0.0:
        return min(-a / b, rho * rho_inc)
    return rho


def compute_scaling(vf: VerticalForm, x, s, y, rho: float, mode: str):
    """Diagonal scaling weights over (x, s, y) for the requested mode.

    ``none`` returns identity weights; ``unit`` clips every primal and dual
    variable of magnitude above one back to unity (entry 1/|value|);
    ``gradient`` weighs the primal scalar products with the absolute
    Lagrangian gradient plus rho and leaves the dual weights at one.
    """
    n, ns, nr = vf.n, vf.n_slack, vf.n_rows
    if mode == "none":
        return np.ones(n), np.ones(ns), np.ones(nr)
    if mode == "unit":
        dx = 1.0 / np.maximum(1.0, np.abs(np.asarray(x, dtype=float)))
        ds = 1.0 / np.maximum(1.0, np.abs(np.asarray(s, dtype=float)))
        dy = 1.0 / np.maximum(1.0, np.abs(np.asarray(y, dtype=float)))
        return dx, ds, dy
    if mode == "gradient":
        gx, gs = mpvcs_lagrangian_grad(vf, x, s, y)
        return np.abs(gx) + rho, np.abs(gs) + rho, np.ones(nr)
    raise ValueError(f"unknown scaling mode {mode!r}")


def mpvcs_lagrangian_grad(vf: VerticalForm, x, s, y):
    """Gradient of the vertical-form Lagrangian over (x, s)."""
    p = vf.base
    y = np.asarray(y, dtype=float)
    _, J = eval_vertical(vf, x, s)
    gxs = np.concatenate([np.asarray(p.grad_f(np.asarray(x, dtype=float)),
                                     dtype=float),
                          np.zeros(vf.n_slack)])
    full = gxs + J.T @ y
    return full[: p.n], full[p.n:]


def stationarity_residual(vf: VerticalForm, x, s, y, sigma: Signature = None,
                          eps: float = 1e-6, feas_tol: float = 1e-8,
                          scaling_mode: str = "none",
                          rho: float = 0.0) -> StationarityReport:
    """Strong-stationarity residual with sign-admissible multiplier choice.

    The candidate multipliers for the controlling/vanishing constraints are
    the current slack-row duals clipped coordinate-wise onto the admissible
    sign sets of the activity classes (zero on inactive classes, nonpositive
    where required, free on lower-branch equalities).  The reported residual
    combines the clipping distances with the polar-cone projection residual
    of the primal rows; feasibility is the max-norm of the combined
    constraint.  ``is_stationary`` requires both the scaled and unscaled
    residual below ``eps`` and feasibility below ``feas_tol``.
    """
    p = vf.base
    x = np.asarray(x, dtype=float)
    s = np.asarray(s, dtype=float)
    y = np.asarray(y, dtype=float)
    c, J = eval_vertical(vf, x, s)
    feas = float(np.max(np.abs(c))) if c.size else 0.0

    s_cc = s[vf.idx_cc]
    s_vc = s[vf.idx_vc]
    idx = classify_indices(s_cc, s_vc, default_activity_tol(s_cc, s_vc))
    y_g = y[: p.m]
    y_cc = y[p.m + vf.idx_cc]
    y_vc = y[p.m + vf.idx_vc]

    eta_H = np.zeros(p.l)
    eta_G = np.zeros(p.l)
    for i in idx.i0m:
        eta_H[i] = y_cc[i]                       # free
    for i in idx.i00 + idx.i0p:
        eta_H[i] = min(y_cc[i], 0.0)             # nonpositive
    for i in idx.ip0:
        eta_G[i] = min(y_vc[i], 0.0)             # nonpositive
    r_cc = y_cc - eta_H
    r_vc = y_vc - eta_G

    gxs = np.concatenate([np.asarray(p.grad_f(x), dtype=float),
                          np.zeros(vf.n_slack)])
    grad_x = (gxs + J.T @ y)[: p.n]
    r_x = polar_residual(-grad_x, x, p.x_l, p.x_u, tol=feas_tol)

    r_full = np.concatenate([r_x, r_cc, r_vc])
    resid_unscaled = float(np.linalg.norm(r_full))
    dx, ds, _ = compute_scaling(vf, x, s, y, rho, scaling_mode)
    weights = np.concatenate([dx, ds[vf.idx_cc], ds[vf.idx_vc]])
    resid_scaled = float(np.sqrt(np.sum(weights * r_full ** 2)))
    stationary = (max(resid_scaled, resid_unscaled) <= eps
                  and feas <= feas_tol)
    return StationarityReport(
        residual=resid_scaled, residual_unscaled=resid_unscaled,
        feasibility=feas, eta_H=eta_H, eta_G=eta_G, y_g=y_g.copy(),
        index_sets=idx, is_stationary=stationary,
    )


def verify_equilibrium(vf: VerticalForm, x, s, y, sigma: Signature,
                       eps: float = 1e-6, feas_tol: float = 1e-8):
    """Independent case-by-case certificate for a claimed stationary point.

    Re-derives the activity classes from H(x) and G(x), checks feasibility of
    every constraint row, the primal polar-cone condition, and the multiplier
    sign condition of each branch case.  Returns ``(ok, cases)`` where
    ``cases`` lists one record per pair with its class label and verdict.
    """
    p = vf.base
    x = np.asarray(x, dtype=float)
    s = np.asarray(s, dtype=float)
    y = np.asarray(y, dtype=float)
    c, J = eval_vertical(vf, x, s)
    feas = float(np.max(np.abs(c))) if c.size else 0.0
    ok = feas <= 10.0 * feas_tol

    hx = np.asarray(p.H(x), dtype=float).reshape(p.l)
    gx = np.asarray(p.G(x), dtype=float).reshape(p.l)
    tol = default_activity_tol(hx, gx)
    y_cc = y[p.m + vf.idx_cc]
    y_vc = y[p.m + vf.idx_vc]

    gxs = np.concatenate([np.asarray(p.grad_f(x), dtype=float),
                          np.zeros(vf.n_slack)])
    grad_x = (gxs + J.T @ y)[: p.n]
    r_x = float(np.linalg.norm(polar_residual(-grad_x, x, p.x_l, p.x_u,
                                              tol=feas_tol)))
    ok = ok and r_x <= eps

    cases = []
    for i in range(p.l):
        h_act = abs(hx[i]) <= tol[i]
        g_act = abs(gx[i]) <= tol[i]
        passed = True
        if sigma.bits[i] == 0:
            if gx[i] < -tol[i]:
                label = "I0-:lower"
                passed = abs(y_vc[i]) <= eps and h_act
            elif g_act:
                label = "I00:lower"
                passed = abs(y_vc[i]) <= eps and y_cc[i] <= eps and h_act
            else:
                label = "violated:lower"
                passed = False
        else:
            if h_act and g_act:
                label = "I00:upper"
                passed = y_cc[i] <= eps and abs(y_vc[i]) <= eps
            elif h_act and gx[i] > tol[i]:
                label = "I0+:upper"
                passed = y_cc[i] <= eps and abs(y_vc[i]) <= eps
            elif not h_act and g_act:
                label = "I+0:upper"
                passed = abs(y_cc[i]) <= eps and y_vc[i] <= eps
            elif hx[i] > tol[i] and gx[i] > tol[i]:
                label = "I++:upper"
                passed = abs(y_cc[i]) <= eps and abs(y_vc[i]) <= eps
            else:
                label = "violated:upper"
                passed = False
        cases.append({"index": i, "label": label, "passed": bool(passed),
                      "H": float(hx[i]), "G": float(gx[i]),
                      "y_cc": float(y_cc[i]), "y_vc": float(y_vc[i])})
        ok = ok and passed
    return bool(ok), cases


def run(vf: VerticalForm, x0, config: FlowConfig = None, y0=None) -> FlowResult:
    """Drive the piecewise flow from a primal guess to a certified point.

    Terminates with :data:`FlowStatus.CERTIFIED` once the stationarity
    report and the independent equilibrium verification both pass, with
    :data:`FlowStatus.STALLED_LAMBDA` when the subproblem keeps failing
    under repeated step-size increases, and with
    :data:`FlowStatus.MAX_OUTER_ITERATIONS` otherwise.
    """
    cfg = config or FlowConfig()
    p = vf.base
    x = project_box(np.asarray(x0, dtype=float), p.x_l, p.x_u)
    s, sigma = initialize_branches(
        vf, x, infeasible_to_lower=cfg.lower_branch_init)
    y = np.zeros(vf.n_rows) if y0 is None else np.asarray(y0, dtype=float).copy()
    if y.shape != (vf.n_rows,):
        raise ValueError("dual start has wrong dimension")

    lam = cfg.lambda_init
    rho = cfg.rho_init
    trace: list[TraceRow] = []
    total_sub = 0
    working = None
    last_status = None
    report = stationarity_residual(vf, x, s, y, sigma, cfg.eps, cfg.feas_tol,
                                   cfg.scaling, rho)

    def result(status, it, cases=None):
        state = FlowState(x=x, s=s, y=y, sigma=sigma, lam=lam, rho=rho,
                          iteration=it, last_sub_status=last_status)
        return FlowResult(
            status=status, state=state, report=report, trace=trace,
            objective=float(p.f(x)), outer_iterations=it,
            sub_iterations=total_sub, certified=status is FlowStatus.CERTIFIED,
            equilibrium_cases=cases or [],
        )

    for it in range(1, cfg.max_outer_iterations + 1):
        layout = build_reduced_layout(vf, sigma)
        dx_full, ds_full, _ = compute_scaling(vf, x, s, y, rho, cfg.scaling)
        # dual prox metric stays Euclidean: the dual update y = y_hat - w is
        # the exact subproblem multiplier only then, and a weakened dual prox
        # destabilizes the anti-gradient flow
        scaling = (dx_full, ds_full[layout.slack_columns()],
                   np.ones(layout.r))

        retries = 0
        sol = None
        while True:
            sub = assemble(vf, sigma, x, s, y, lam, rho, scaling)
            sol = solve(sub, tol=cfg.sub_tol, max_iter=cfg.sub_max_iter,
                        working=working)
            total_sub += sol.iterations
            last_status = sol.status
            if sol.converged:
                break
            working = None
            lam = update_lambda(lam, False, cfg.lambda_inc)
            retries += 1
            if retries > cfg.max_lambda_retries or lam > cfg.lambda_max:
                return result(FlowStatus.STALLED_LAMBDA, it)
        lam = update_lambda(lam, True, cfg.lambda_inc)

        x = sol.x
        s, _ = expand_solution(vf, layout, x, sol.s_red)
        y = np.zeros(vf.n_rows)
        y[layout.full_rows()] = sub.y_hat - sol.w
        working = sol.working

        c, J = eval_vertical(vf, x, s)
        bounds = piece_bounds(vf, sigma)
        z = np.concatenate([x, s])
        lb = np.concatenate([p.x_l, bounds.s_lo])
        ub = np.concatenate([p.x_u, bounds.s_hi])
        gxs = np.concatenate([np.asarray(p.grad_f(x), dtype=float),
                              np.zeros(vf.n_slack)])
        grad_lag = gxs + J.T @ y
        flow_vec = -(grad_lag + rho * (J.T @ c))
        pprime = projection_derivative_element(flow_vec, z, lb, ub)
        rho = update_rho(rho, cfg.rho_inc, c, J, grad_lag, pprime)

        report = stationarity_residual(vf, x, s, y, sigma, cfg.eps,
                                       cfg.feas_tol, cfg.scaling, rho)
        switched = False
        if report.is_stationary:
            ok, cases = verify_equilibrium(vf, x, s, y, sigma, cfg.eps,
                                           cfg.feas_tol)
            trace.append(TraceRow(it, lam, rho, str(sigma), float(p.f(x)),
                                  report.residual, report.feasibility,
                                  sol.iterations, False))
            if ok:
                return result(FlowStatus.CERTIFIED, it, cases)
            continue

        neg_grad_s = (y + rho * c)[p.m:]
        s_cc, s_vc = s[vf.idx_cc], s[vf.idx_vc]
        bi = classify_indices(s_cc, s_vc, cfg.feas_tol)
        new_sigma = detect_switches(sigma, bi, neg_grad_s, tol=cfg.eps,
                                    single_flip=cfg.single_flip)
        switched = new_sigma != sigma
        if switched:
            working = None
        trace.append(TraceRow(it, lam, rho, str(sigma), float(p.f(x)),
                              report.residual, report.feasibility,
                              sol.iterations, switched))
        sigma = new_sigma

    return result(FlowStatus.MAX_OUTER_ITERATIONS, cfg.max_outer_iterations)
