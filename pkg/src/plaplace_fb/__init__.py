"""Numerical laboratory for the one-phase p-Laplacian free boundary functional."""
from .energy import (DegenerateInput, EnergyBreakdown, InvalidExponent, PositivityRule,
                     eval_Jp, monotonicity_gap, sample_gamma, zero_set_measure)
from .grid import (Ball, EmptyBall, Grid, GridError, OutOfDomain, ScalarField, VectorField,
                   ball_average, discrete_gradient, dump_field, load_field, rescale)
from .minimize import (AlmostMinParams, MinimizeReport, NegativeBoundary, PhiSpec,
                       make_nonlocal_almost_minimizer, minimize_Jp, verify_almost_min)
from .pharmonic import (EllipticityBounds, HypothesisViolated, NonConvergence,
                        ReplacementResult, averaged_jacobian, interior_gradient_bound_check,
                        p_harmonic_replacement)
from .regularity import (CampanatoReport, DecayTrace, DenominatorNonpositive,
                         DichotomyOutcome, ExponentOutOfRange, FlatnessState,
                         OriginNotInZeroSet, ResolutionFloor, campanato_seminorm,
                         check_energy_comparison, dichotomy_constants, dichotomy_experiment,
                         dyadic_decay_track, free_boundary_lipschitz_experiment,
                         improvement_step, lipschitz_experiment)

__all__ = [
    "DegenerateInput", "EnergyBreakdown", "InvalidExponent", "PositivityRule", "eval_Jp",
    "monotonicity_gap", "sample_gamma", "zero_set_measure", "Ball", "EmptyBall", "Grid",
    "GridError", "OutOfDomain", "ScalarField", "VectorField", "ball_average",
    "discrete_gradient", "dump_field", "load_field", "rescale", "AlmostMinParams",
    "MinimizeReport", "NegativeBoundary", "PhiSpec", "make_nonlocal_almost_minimizer",
    "minimize_Jp", "verify_almost_min", "EllipticityBounds", "HypothesisViolated",
    "NonConvergence", "ReplacementResult", "averaged_jacobian",
    "interior_gradient_bound_check", "p_harmonic_replacement", "CampanatoReport", "DecayTrace",
    "DenominatorNonpositive", "DichotomyOutcome", "ExponentOutOfRange", "FlatnessState",
    "OriginNotInZeroSet", "ResolutionFloor", "campanato_seminorm", "check_energy_comparison",
    "dichotomy_constants", "dichotomy_experiment", "dyadic_decay_track",
    "free_boundary_lipschitz_experiment", "improvement_step", "lipschitz_experiment",
]

__version__ = "0.1.0"
