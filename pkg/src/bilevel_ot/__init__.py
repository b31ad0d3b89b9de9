"""Discrete optimal transport with quadratic regularization and bilevel problems built on it."""

from .bilevel import (
    BilevelInstance,
    BKOptions,
    ConvergenceRecord,
    ObjectiveSpec,
    Schedule,
    StudyOptions,
    exact_objective,
    make_schedule,
    recovery_sequence,
    reduced_objective,
    run_convergence_study,
    simplex_project,
    solve_bk_exact,
    solve_bk_n,
    solve_ocp_convex,
)
from .errors import *  # noqa: F401,F403
from .exact_ot import (
    CostField,
    TransportPlan,
    check_coupling,
    monotone_plan_1d,
    plan_w1,
    solve_kp,
    solve_kp_certified,
    wasserstein_beta,
)
from .gluing import TriCoupling, glue, glue_and_project, mollified_plan, transfer_plan
from .measure_core import (
    DiscreteMeasure,
    Grid,
    SupportMask,
    extend_by_zero,
    mollify_shift,
    restrict,
    support_distance,
    w1_1d,
)
from .pde import PoissonOperator, dual_norm, solve_poisson
from .reg_ot import DualPotentials, RegSolution, SolverOptions, primal_from_dual, reg_objective, reg_residual, solve_reg

__version__ = "0.1.0"
