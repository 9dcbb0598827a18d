"""Smoothed quasi-binomial mixed models for regional bounded-count data."""

from .basis import DesignSystem, SplineBasis, build_basis, build_design, penalty_matrix
from .error_model import ErrorRates, e_step, fit_with_error, phi_from_phi_y, phi_y_from_phi, plugin_phi
from .fit_complete import FitResult, edf, fit, fit_counts, fletcher_phi, inner_solve
from .quasi_likelihood import (
    VarianceComponents,
    laplace_objective,
    penalized_objective,
    quasi_deviance,
    quasi_score,
    score_hessian,
)
from .region_data import ModelSpec, RegionData, default_basis_ranks, load_region, load_regions, write_region

__all__ = [
    "DesignSystem", "SplineBasis", "build_basis", "build_design", "penalty_matrix",
    "ErrorRates", "e_step", "fit_with_error", "phi_from_phi_y", "phi_y_from_phi", "plugin_phi",
    "FitResult", "edf", "fit", "fit_counts", "fletcher_phi", "inner_solve",
    "VarianceComponents", "laplace_objective", "penalized_objective", "quasi_deviance",
    "quasi_score", "score_hessian",
    "ModelSpec", "RegionData", "default_basis_ranks", "load_region", "load_regions", "write_region",
]
