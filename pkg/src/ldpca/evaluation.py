"""Two-step KDE baseline and distances to oracle estimates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .function_space import ClrFunction, Grid, GridFunction, GridMismatchError, clr
from .initialization import KdeConfig, SampleSet, kde
from .model import PCARepresentation, sorted_eigh

__all__ = [
    "OracleEstimates",
    "two_step_pca",
    "oracle_estimates",
    "pointwise_moments",
    "mean_distance",
    "cov_distance",
]


def pointwise_moments(clr_values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise mean and covariance (divisor n) of clr functions given row-wise."""
    g = np.asarray(clr_values, dtype=float)
    mean = g.mean(axis=0)
    c = g - mean
    cov = c.T @ c / g.shape[0]
    return mean, 0.5 * (cov + cov.T)


def _grid_pca(grid: Grid, g: np.ndarray) -> PCARepresentation:
    mean, cov = pointwise_moments(g)
    w = grid.width
    # covariance operator in an orthonormal cell frame is w * cov
    vals, vecs = sorted_eigh(w * cov)
    keep = vals > 1e-12 * vals[0] if vals[0] > 0 else np.zeros(vals.size, bool)
    vals, vecs = vals[keep], vecs[:, keep]
    phi = (vecs / np.sqrt(w)).T
    scores = w * (g - mean) @ phi.T
    total = float(np.trace(w * cov))
    return PCARepresentation(grid, ClrFunction(grid, mean), phi, vals, scores, total)


def two_step_pca(data: SampleSet, kde_cfg: KdeConfig) -> PCARepresentation:
    """Simplicial PCA of clr-transformed kernel density estimates.

    Components with numerically zero eigenvalue are dropped; the scores are
    the L2 projections of the centered clr-KDEs on the eigenfunctions.
    """
    if data.n_groups < 2:
        raise ValueError("two_step_pca needs at least 2 groups")
    g = np.vstack([clr(kde(x, kde_cfg, data.grid)).values for x in data.groups])
    return _grid_pca(data.grid, g)


@dataclass(frozen=True, eq=False)
class OracleEstimates:
    """Pointwise clr mean and covariance of the true densities."""

    mean: ClrFunction
    covariance: np.ndarray = field(repr=False)
    source: list = field(repr=False)


def oracle_estimates(true_densities: Sequence[GridFunction]) -> OracleEstimates:
    """Empirical clr mean and covariance (divisor n) of known densities."""
    if len(true_densities) < 2:
        raise ValueError("need at least 2 densities")
    grid = true_densities[0].grid
    if any(f.grid != grid for f in true_densities):
        raise GridMismatchError("densities live on different grids")
    g = np.vstack([clr(f).values for f in true_densities])
    mean, cov = pointwise_moments(g)
    return OracleEstimates(ClrFunction(grid, mean), cov, list(true_densities))


def mean_distance(a: GridFunction, b: GridFunction) -> float:
    """``sqrt(int (a - b)^2)``."""
    if a.grid != b.grid:
        raise GridMismatchError(f"{a.grid} != {b.grid}")
    d = a.values - b.values
    return float(np.sqrt(a.grid.width * np.dot(d, d)))


def cov_distance(a: np.ndarray, b: np.ndarray, grid: Grid) -> float:
    """``sqrt(iint (A - B)^2)`` for kernels given on cell pairs."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    shape = (grid.n_cells, grid.n_cells)
    if a.shape != shape or b.shape != shape:
        raise GridMismatchError(f"covariances must be {shape}")
    return float(grid.width * np.sqrt(np.sum((a - b) ** 2)))
