"""Differentiable ADMM layer for box- and equality-constrained quadratic programs."""

from .admm import KKTFactorization, admm_solve, factorize_kkt, project_box, recover_duals
from .core import (
    AsymmetricQ,
    BoundsInverted,
    CyclingDetected,
    DimensionMismatch,
    DualPair,
    GradientBundle,
    MissingTrace,
    QPError,
    QPProblem,
    QPSolution,
    SingularBackwardSystem,
    SingularKKT,
    SolverConfig,
    generate_exp1_problem,
    validate_problem,
)
from .diff import BackwardMethod, backward, backward_fixed_point, backward_kkt, backward_unrolled

__version__ = "0.1.0"
