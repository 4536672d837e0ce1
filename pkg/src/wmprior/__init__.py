"""Whittle-Matérn priors for image reconstruction.

Matérn correlation and semivariogram tools, sparse SPDE precision
operators (isotropic, anisotropic and regional), MAP solvers with GCV
regularization selection, and the iterative hyperparameter pipelines
that tie them together.
"""
from .grid import Field, Grid2D
from .matern import (AnisotropyEstimate, MaternFit, bessel_k, correlation_distance, matern_correlation,
                     matern_semivariogram, practical_range, range_approximation)
from .semivariogram import (EmpiricalSemivariogram, SemivariogramError, directional_semivariogram,
                            empirical_semivariogram, estimate_anisotropy, fit_matern_semivariogram,
                            isotropize_coordinates)
from .spde import (PrecisionSpec, PriorOperator, assemble_anisotropic_precision,
                   assemble_isotropic_precision, extension_factor, sample_prior, validate_connection)
from .regional import RegionPartition, RegionalOperator, build_regional_operator
from .solver import BlurKernel, ForwardModel, gcv_alpha, map_estimate, oracle_alpha
from .metrics import load_image, report_statistics, save_image

__all__ = [
    "Field", "Grid2D", "AnisotropyEstimate", "MaternFit", "bessel_k", "correlation_distance",
    "matern_correlation", "matern_semivariogram", "practical_range", "range_approximation",
    "EmpiricalSemivariogram", "SemivariogramError", "directional_semivariogram", "empirical_semivariogram",
    "estimate_anisotropy", "fit_matern_semivariogram", "isotropize_coordinates", "PrecisionSpec",
    "PriorOperator", "assemble_anisotropic_precision", "assemble_isotropic_precision", "extension_factor",
    "sample_prior", "validate_connection", "RegionPartition", "RegionalOperator", "build_regional_operator",
    "BlurKernel", "ForwardModel", "gcv_alpha", "map_estimate", "oracle_alpha", "load_image",
    "report_statistics", "save_image",
]
