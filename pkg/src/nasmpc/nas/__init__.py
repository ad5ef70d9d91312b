"""Nonlinear Active Set solver for the FTOCP."""
from .active_set import ActiveSet, clean_direction, constraint_multipliers, project_direction, release_constraints
from .kkt import KktFactor, KktWorkspace, factor_of, solve_structured
from .solver import (
    KktSolution,
    LocalQp,
    NasConfig,
    NasResult,
    backtracking,
    build_local_qp,
    line_search,
    max_step,
    nas_solve,
    reduced_gradient,
    solve_kkt,
    warm_start,
)
