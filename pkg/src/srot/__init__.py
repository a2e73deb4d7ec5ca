"""Semi-relaxed optimal transport: solvers, convergence bounds, rounding and exact oracles."""

from ._version import __version__
from .bounds import BoundReport, bound_report
from .core import (
    CostMatrix,
    DiscreteMeasure,
    NumericalError,
    ParityError,
    ProblemInstance,
    SimplexError,
    SrotError,
    TransportPlan,
    entropy,
    generate_instance,
    kl_divergence,
)
from .exact import LpSolution, brute_force_ot_uniform, kl_srot_reference, solve_ot_exact
from .rounding import round_to_polytope
from .solvers import (
    DualPotentials,
    SolverConfig,
    SolverTrace,
    dual_objective,
    evaluate_f,
    evaluate_g,
    plan_from_potentials,
    pot_column_min,
    sr_sinkhorn,
    standard_sinkhorn,
    uot_sinkhorn,
)

__all__ = [
    "__version__",
    "BoundReport",
    "bound_report",
    "CostMatrix",
    "DiscreteMeasure",
    "NumericalError",
    "ParityError",
    "ProblemInstance",
    "SimplexError",
    "SrotError",
    "TransportPlan",
    "entropy",
    "generate_instance",
    "kl_divergence",
    "LpSolution",
    "brute_force_ot_uniform",
    "kl_srot_reference",
    "solve_ot_exact",
    "round_to_polytope",
    "DualPotentials",
    "SolverConfig",
    "SolverTrace",
    "dual_objective",
    "evaluate_f",
    "evaluate_g",
    "plan_from_potentials",
    "pot_column_min",
    "sr_sinkhorn",
    "standard_sinkhorn",
    "uot_sinkhorn",
]
