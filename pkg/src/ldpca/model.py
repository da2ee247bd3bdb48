"""Finite-dimensional latent Gaussian process in clr space.

A :class:`LatentDensityModel` is a basis together with the mean ``nu`` and
covariance ``sigma`` of the basis coefficients. Its eigendecomposition gives
the functional principal components of the process.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .function_space import (
    Basis,
    Density,
    Grid,
    GridFunction,
    clr_inverse,
    expand,
)

__all__ = [
    "LatentDensityModel",
    "PCARepresentation",
    "BayesPCAView",
    "sorted_eigh",
    "kernel_matrix",
    "eigen_decompose",
    "reconstruct_density",
    "bayes_pca_view",
]

SYMMETRY_TOL = 1e-8
NEGATIVE_EIG_TOL = 1e-10


def sorted_eigh(sigma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of a symmetric matrix, eigenvalues nonincreasing.

    Each eigenvector is signed so that its largest-magnitude entry is
    positive. Eigenvalues in ``[-1e-10, 0)`` are clipped to zero.

    Raises
    ------
    ValueError
        If an eigenvalue is below ``-1e-10``.
    """
    vals, vecs = np.linalg.eigh(sigma)
    order = np.argsort(vals)[::-1]
    vals = vals[order]
    vecs = vecs[:, order]
    if vals.size and vals[-1] < -NEGATIVE_EIG_TOL:
        raise ValueError(f"covariance is not PSD: eigenvalue {vals[-1]!r}")
    vals = np.where(vals < 0, 0.0, vals)
    pivot = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[pivot, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vals, vecs * signs


@dataclass(frozen=True, eq=False)
class LatentDensityModel:
    """Coefficient mean and covariance of the latent process on `basis`."""

    basis: Basis
    nu: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)

    def __post_init__(self):
        n = self.basis.size
        nu = np.array(self.nu, dtype=float).ravel()
        sigma = np.array(self.sigma, dtype=float)
        if nu.shape != (n,):
            raise ValueError(f"nu must have length {n}, got {nu.shape}")
        if sigma.shape != (n, n):
            raise ValueError(f"sigma must be {n}x{n}, got {sigma.shape}")
        if not (np.all(np.isfinite(nu)) and np.all(np.isfinite(sigma))):
            raise ValueError("model parameters must be finite")
        scale = max(1.0, float(np.abs(sigma).max(initial=0.0)))
        asym = float(np.abs(sigma - sigma.T).max(initial=0.0))
        if asym > SYMMETRY_TOL * scale:
            raise ValueError(f"sigma is not symmetric (max asymmetry {asym:.3g})")
        sigma = 0.5 * (sigma + sigma.T)
        min_eig = float(np.linalg.eigvalsh(sigma)[0])
        if min_eig < -NEGATIVE_EIG_TOL * scale:
            raise ValueError(f"sigma is not PSD: eigenvalue {min_eig!r}")
        nu.flags.writeable = False
        sigma.flags.writeable = False
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def from_estimates(cls, basis: Basis, nu, sigma) -> "LatentDensityModel":
        """Build a model after projecting onto the integrate-to-zero subspace."""
        nu, sigma = enforce_constraint(basis, nu, sigma)
        return cls(basis, nu, sigma)

    @property
    def grid(self) -> Grid:
        return self.basis.grid

    @property
    def mean(self) -> GridFunction:
        return expand(self.nu, self.basis)


def enforce_constraint(basis: Basis, nu, sigma) -> tuple[np.ndarray, np.ndarray]:
    """Project ``nu`` and ``sigma`` so every expansion integrates to zero."""
    p = basis.constraint_projector()
    nu = p @ np.asarray(nu, dtype=float)
    sigma = p @ np.asarray(sigma, dtype=float) @ p
    return nu, 0.5 * (sigma + sigma.T)


@dataclass(frozen=True, eq=False)
class PCARepresentation:
    """Mean, eigenfunctions, eigenvalues and scores on the clr level.

    Attributes
    ----------
    grid : Grid
    mean : GridFunction
    eigenfunctions : ndarray of shape (K, n_cells)
        L2-orthonormal eigenfunctions, one per row.
    eigenvalues : ndarray of shape (K,)
        Nonincreasing, nonnegative.
    scores : ndarray of shape (n_groups, K)
    total_variance : float
        Sum of all eigenvalues of the covariance, including components
        that were dropped; the denominator of `variance_explained`.
    eigenvectors : ndarray of shape (N, K), optional
        Coefficient-space eigenvectors when the PCA came from a basis model.
    """

    grid: Grid
    mean: GridFunction
    eigenfunctions: np.ndarray = field(repr=False)
    eigenvalues: np.ndarray
    scores: np.ndarray = field(repr=False)
    total_variance: float
    eigenvectors: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        phi = np.atleast_2d(np.asarray(self.eigenfunctions, dtype=float))
        lam = np.asarray(self.eigenvalues, dtype=float).ravel()
        if phi.shape[0] != lam.size or (lam.size and phi.shape[1] != self.grid.n_cells):
            raise ValueError("eigenfunctions and eigenvalues disagree in shape")
        if lam.size == 0:
            phi = np.zeros((0, self.grid.n_cells))
        scores = np.asarray(self.scores, dtype=float)
        if scores.ndim < 2 and scores.size == 0:
            scores = np.zeros((0, lam.size))
        if scores.ndim != 2 or scores.shape[1] != lam.size:
            raise ValueError(f"scores must have {lam.size} columns")
        object.__setattr__(self, "eigenfunctions", phi)
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "scores", scores)

    @property
    def n_components(self) -> int:
        return self.eigenvalues.size

    @property
    def variance_explained(self) -> np.ndarray:
        """Cumulative fraction of total variance per component."""
        if self.total_variance <= 0:
            return np.ones_like(self.eigenvalues)
        return np.cumsum(self.eigenvalues) / self.total_variance

    def component(self, k: int) -> GridFunction:
        return GridFunction(self.grid, self.eigenfunctions[k])

    def with_scores(self, scores) -> "PCARepresentation":
        return replace(self, scores=np.asarray(scores, dtype=float))

    def truncated(self, k: int) -> "PCARepresentation":
        return replace(
            self,
            eigenfunctions=self.eigenfunctions[:k],
            eigenvalues=self.eigenvalues[:k],
            scores=self.scores[:, :k],
            eigenvectors=None if self.eigenvectors is None else self.eigenvectors[:, :k],
        )

    def covariance_matrix(self) -> np.ndarray:
        """Covariance kernel on cell pairs rebuilt from the kept components."""
        phi = self.eigenfunctions
        return (phi.T * self.eigenvalues) @ phi

    def clr_predictions(self) -> np.ndarray:
        """Predicted clr functions, one row per group."""
        return self.mean.values + self.scores @ self.eigenfunctions


def kernel_matrix(model: LatentDensityModel) -> np.ndarray:
    """Covariance kernel ``K(x, x')`` on all pairs of cell midpoints."""
    e = model.basis.matrix
    k = e @ model.sigma @ e.T
    return 0.5 * (k + k.T)


def eigen_decompose(model: LatentDensityModel) -> PCARepresentation:
    """Map the eigenpairs of ``sigma`` to eigenfunctions of the process.

    Requires an orthonormal basis; scores are left empty.
    """
    if not model.basis.is_orthonormal:
        raise ValueError("eigen_decompose requires an orthonormal basis")
    vals, vecs = sorted_eigh(model.sigma)
    phi = (model.basis.matrix @ vecs).T
    return PCARepresentation(
        grid=model.grid,
        mean=model.mean,
        eigenfunctions=phi,
        eigenvalues=vals,
        scores=np.zeros((0, vals.size)),
        total_variance=float(vals.sum()),
        eigenvectors=vecs,
    )


def reconstruct_density(pca: PCARepresentation, scores, k_components: int | None = None) -> Density:
    """``clr_inverse(mean + sum_{k < K} scores[k] * phi_k)``."""
    if k_components is None:
        k_components = pca.n_components
    if not 0 <= k_components <= pca.n_components:
        raise ValueError(
            f"k_components must be in [0, {pca.n_components}], got {k_components}"
        )
    z = np.asarray(scores, dtype=float).ravel()
    if z.size < k_components:
        raise ValueError(f"need at least {k_components} scores, got {z.size}")
    g = pca.mean.values + z[:k_components] @ pca.eigenfunctions[:k_components]
    return clr_inverse(GridFunction(pca.grid, g))


@dataclass(frozen=True, eq=False)
class BayesPCAView:
    """Density-level picture of a PCA."""

    mean: Density
    directions: list[Density]
    plus: list[Density]
    minus: list[Density]


def bayes_pca_view(pca: PCARepresentation) -> BayesPCAView:
    """Back-transform the mean, each eigenfunction and ``mean +- sd_k * phi_k``."""
    mu = pca.mean.values
    sd = np.sqrt(pca.eigenvalues)
    directions, plus, minus = [], [], []
    for k in range(pca.n_components):
        phi = pca.eigenfunctions[k]
        directions.append(clr_inverse(GridFunction(pca.grid, phi)))
        plus.append(clr_inverse(GridFunction(pca.grid, mu + sd[k] * phi)))
        minus.append(clr_inverse(GridFunction(pca.grid, mu - sd[k] * phi)))
    return BayesPCAView(clr_inverse(pca.mean), directions, plus, minus)
