"""Piecewise gradient/anti-gradient flows for vanishing-constraint programs.

The package solves programs whose constraints switch on and off with the sign
of controlling functions.  It reformulates each controlling/vanishing pair
with slacks, follows a proximal-regularized primal-dual flow inside one
convex branch at a time, switches branches at bi-active points, and certifies
strong stationarity of the limit.  Benchmark generators (a two-variable
academic program and truss topology design instances), a smoothing-based
relaxation baseline, and a CLI with a benchmark harness are included.
"""

from .model import (
    CallbackFailure,
    InfeasibleControlling,
    IndexSets,
    MpvcProblem,
    VerticalForm,
    classify_indices,
    default_activity_tol,
    eval_vertical,
    to_vertical_form,
)
from .branch import (
    PieceBounds,
    ReducedLayout,
    Signature,
    build_reduced_layout,
    detect_switches,
    expand_solution,
    initialize_branches,
    piece_bounds,
    reduce_slacks,
)
from .subnlp import (
    DimensionMismatch,
    ProximalSubproblem,
    SolverMaxIterations,
    SubSolution,
    SubStatus,
    assemble,
    solve,
    solve_sign_constrained_lsq,
)

__version__ = "0.1.0"
