"""Functional PCA of densities observed through finite samples.

Each group's observations are modelled as draws from ``clr_inverse(G_i)``
with ``G_i`` a finite-dimensional Gaussian process in clr space. Mean and
covariance are estimated by Monte Carlo EM; a two-step KDE baseline, a
count-composition mode and a simulation harness are included.
"""

from .compositional import CountData, fit_compositional
from .evaluation import cov_distance, mean_distance, oracle_estimates, two_step_pca
from .function_space import (
    Basis, ClrFunction, Density, DomainError, Grid, GridFunction, GridMismatchError,
    bayes_inner_product, clr, clr_inverse, explicit_basis, make_basis,
)
from .initialization import KdeConfig, SampleSet, init_from_kde, init_identity
from .mcem import FitResult, ImproperPriorError, McemConfig, NumericalError, fit, predict_scores
from .model import LatentDensityModel, PCARepresentation, eigen_decompose, kernel_matrix
from .simulation import StudyConfig, run_study, summarize

__version__ = "0.1.0"

__all__ = [
    "Basis", "ClrFunction", "CountData", "Density", "DomainError", "FitResult", "Grid",
    "GridFunction", "GridMismatchError", "ImproperPriorError", "KdeConfig",
    "LatentDensityModel", "McemConfig", "NumericalError", "PCARepresentation", "SampleSet",
    "StudyConfig", "bayes_inner_product", "clr", "clr_inverse", "cov_distance",
    "eigen_decompose", "explicit_basis", "fit", "fit_compositional", "init_from_kde",
    "init_identity", "kernel_matrix", "make_basis", "mean_distance", "oracle_estimates",
    "predict_scores", "run_study", "summarize", "two_step_pca",
]
