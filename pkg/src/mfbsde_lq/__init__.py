"""Linear-quadratic optimal control of mean-field backward SDEs with jumps.

Decoupling pipeline: two backward Riccati matrix ODEs, an auxiliary MF-BSDE,
a forward adjoint SDE, and reconstruction of the optimal control and state
processes, plus Monte Carlo verification of the optimality theory.
"""

__version__ = "0.1.0"

from .problem import (
    CoefficientSet,
    DimensionError,
    HorizonError,
    JumpMeasure,
    PiecewiseMatrix,
    ProblemSpec,
    TerminalCondition,
    TimeGrid,
    TimeHorizon,
    build_grid,
    validate_assumptions,
)
from .noise import NoiseIncrements, PathEnsemble, empirical_mean, generate_noise
from .riccati import RiccatiPair, solve_riccati
from .bsde import (
    AdjointProcess,
    ControlProcess,
    PhiSolution,
    StateProcesses,
    control_from_adjoint,
    solve_adjoint,
    solve_hamilton_picard,
    solve_phi,
    solve_state_bsde,
)
from .pipeline import (
    CostValue,
    DecoupledSolution,
    GateauxDerivative,
    brute_force_lq_oracle,
    evaluate_cost,
    gateaux_derivative,
    hamilton_residual,
    picard_distance,
    reconstruct_optimal,
    solve_k_forward,
    solve_problem,
    stationarity_residual,
    verify_optimality,
)
from .specfile import SpecFileError, load_spec, parse_spec

__all__ = [
    "__version__",
    "CoefficientSet", "DimensionError", "HorizonError", "JumpMeasure",
    "PiecewiseMatrix", "ProblemSpec", "TerminalCondition", "TimeGrid",
    "TimeHorizon", "build_grid", "validate_assumptions",
    "NoiseIncrements", "PathEnsemble", "empirical_mean", "generate_noise",
    "RiccatiPair", "solve_riccati",
    "AdjointProcess", "ControlProcess", "PhiSolution", "StateProcesses",
    "control_from_adjoint", "solve_adjoint", "solve_hamilton_picard",
    "solve_phi", "solve_state_bsde",
    "CostValue", "DecoupledSolution", "GateauxDerivative",
    "brute_force_lq_oracle", "evaluate_cost", "gateaux_derivative",
    "hamilton_residual", "picard_distance", "reconstruct_optimal",
    "solve_k_forward", "solve_problem", "stationarity_residual",
    "verify_optimality",
    "SpecFileError", "load_spec", "parse_spec",
]
