"""Numerical toolkit for degenerate conservative diffusion with controls and conservative noise on the torus."""

from .errors import (ConfigError, DomainError, GridMismatch, InfeasibleProblem, InvalidNonlinearity,
                     NewtonFailure, NonnegativityFailure, NumericalFailure, ResolutionError, SingularityError,
                     SkeldError, SolverError)
from .grid import (ControlField, Field, Grid, SpectralBasis, criticality_exponent, criticality_fit,
                   project_PK, rescale_control)
from .nonlinearity import (AssumptionReport, NonlinearitySpec, RegularizationParams, check_assumptions,
                           defect_coeff, entropy_density, phi_eval, regularized_sqrt_phi, theta_functions,
                           truncate_phi)
from .rate import (OptimizerConfig, RateEvaluation, control_energy, gamma_sweep, minimize_action,
                   minimize_event_action, recover_minimal_control)
from .skeleton import (SolverConfig, Trajectory, contraction_distance, defect_field, entropy_report,
                       solve_skeleton)
from .spde import (L1DeviationEvent, MassDeviationEvent, NoiseConfig, SpdePath, estimate_event_probability,
                   ito_correction, simulate_ensemble, simulate_spde)

__version__ = "0.1.0"

__all__ = [
    "AssumptionReport", "ConfigError", "ControlField", "DomainError", "Field", "Grid", "GridMismatch",
    "InfeasibleProblem", "InvalidNonlinearity", "L1DeviationEvent", "MassDeviationEvent", "NewtonFailure",
    "NoiseConfig", "NonlinearitySpec", "NonnegativityFailure", "NumericalFailure", "OptimizerConfig",
    "RateEvaluation", "RegularizationParams", "ResolutionError", "SingularityError", "SkeldError",
    "SolverConfig", "SolverError", "SpdePath", "SpectralBasis", "Trajectory", "check_assumptions",
    "contraction_distance", "control_energy", "criticality_exponent", "criticality_fit", "defect_coeff",
    "defect_field", "entropy_density", "entropy_report", "estimate_event_probability", "gamma_sweep",
    "ito_correction", "minimize_action", "minimize_event_action", "phi_eval", "project_PK",
    "recover_minimal_control", "regularized_sqrt_phi", "rescale_control", "simulate_ensemble", "simulate_spde",
    "solve_skeleton", "theta_functions", "truncate_phi",
]
