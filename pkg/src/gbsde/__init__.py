"""Numerical toolkit for backward SDEs under G-expectation on controlled lattices."""

__version__ = "0.1.0"

from .errors import (ConfigError, DomainError, GbsdeError, InputError, NumericError, ParseError,
                     PreconditionError, ResourceError)
from .gcore import GeneratorSpec, SamplePlan, VolatilitySet, eval_G, phi_of_q, sigma_bounds
from .extspace import ExtendedConstruction, IndexMaps, LinearCoefficients, build_lambda, build_theta_tilde, d_tilde
from .lattice import (PathFunctional, ScenarioTree, TimeGrid, build_extended_tree, build_tree,
                      conditional_upper_expectation, girsanov_expectation, upper_expectation)
from .linearize import LinearizationOutput, l_eps, linearize_pair, verify_linearization
from .bsde import (BsdeSolution, InfiniteHorizonResult, LinearBsdeSpec, compare_solutions, lemma_ey_bound,
                   solve_infinite_horizon, solve_linear_direct, solve_linear_explicit, solve_quadratic_fh)

__all__ = [
    "BsdeSolution", "ConfigError", "DomainError", "ExtendedConstruction", "GbsdeError", "GeneratorSpec",
    "IndexMaps", "InfiniteHorizonResult", "InputError", "LinearBsdeSpec", "LinearCoefficients",
    "LinearizationOutput", "NumericError", "ParseError", "PathFunctional", "PreconditionError",
    "ResourceError", "SamplePlan", "ScenarioTree", "TimeGrid", "VolatilitySet", "build_extended_tree",
    "build_lambda", "build_theta_tilde", "build_tree", "compare_solutions", "conditional_upper_expectation",
    "d_tilde", "eval_G", "girsanov_expectation", "l_eps", "lemma_ey_bound", "linearize_pair", "phi_of_q",
    "sigma_bounds", "solve_infinite_horizon", "solve_linear_direct", "solve_linear_explicit",
    "solve_quadratic_fh", "upper_expectation", "verify_linearization",
]
