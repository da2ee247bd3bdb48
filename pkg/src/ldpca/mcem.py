"""Monte Carlo EM for the latent density model.

Each iteration truncates the current covariance to the components carrying
most of the variance, finds the posterior mode of every group's scores,
draws importance samples around it, and replaces ``nu`` and ``sigma`` by
the weighted mean and covariance of the lifted draws.

Groups enter the engine as cell-count vectors: the log-likelihood of a
group only depends on how many observations fall in each cell.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from .function_space import Basis, Density, GridFunction, clr_inverse
from .initialization import SampleSet
from .model import (
    LatentDensityModel,
    PCARepresentation,
    enforce_constraint,
    sorted_eigh,
)

__all__ = [
    "McemConfig",
    "ImproperPriorError",
    "NumericalError",
    "Truncation",
    "PosteriorState",
    "ModeResult",
    "GroupDraws",
    "EStepDraws",
    "McemTrace",
    "FitResult",
    "truncate",
    "log_posterior_unnormalized",
    "log_posterior_gradient",
    "log_posterior_hessian",
    "find_mode",
    "importance_sample",
    "e_step",
    "m_step",
    "fit",
    "fit_counts",
    "predict_scores",
    "group_rng",
]

log = logging.getLogger(__name__)

_ARMIJO_C = 1e-4
_MAX_BACKTRACKS = 60
_RESOLUTION = 64 * np.finfo(float).eps


class ImproperPriorError(ValueError):
    """A retained prior variance is infinite, so the mode may not exist."""


class NumericalError(ArithmeticError):
    """The objective became non-finite."""


@dataclass(frozen=True)
class McemConfig:
    """MCEM tuning parameters.

    Attributes
    ----------
    epsilon : float
        Stop once both ``||nu_new - nu||_2`` and ``||sigma_new - sigma||_F``
        fall below this.
    lam : float
        Proposal variance scale relative to the prior variances.
    mc_growth : int
        Importance draws per group in iteration ``h`` are ``mc_growth * h``.
    var_explained : float
        Fraction of variance the retained components must explain.
    max_iterations, mode_tol, mode_max_steps : numbers
        Iteration caps and the gradient-norm tolerance of the mode search.
    mode_method : {"newton", "gradient"}
        Ascent direction used in the mode search.
    seed : int
        Root of all random streams.
    n_jobs : int
        Worker threads for the per-group E-step. Results do not depend on it.
    """

    epsilon: float = 1e-3
    lam: float = 1.0
    mc_growth: int = 10
    var_explained: float = 0.99999
    max_iterations: int = 200
    mode_tol: float = 1e-6
    mode_max_steps: int = 500
    mode_method: str = "newton"
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if int(self.mc_growth) != self.mc_growth or self.mc_growth < 1:
            raise ValueError("mc_growth must be a positive integer")
        if not 0 < self.var_explained <= 1:
            raise ValueError("var_explained must lie in (0, 1]")
        if self.max_iterations < 1 or self.mode_max_steps < 1:
            raise ValueError("iteration limits must be positive")
        if not self.mode_tol > 0:
            raise ValueError("mode_tol must be positive")
        if self.mode_method not in ("newton", "gradient"):
            raise ValueError(f"unknown mode_method {self.mode_method!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.n_jobs < 1:
            raise ValueError("n_jobs must be >= 1")


def group_rng(seed: int, iteration: int, group: int) -> np.random.Generator:
    """Counter-based stream for one group in one iteration."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(iteration), int(group)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True, eq=False)
class Truncation:
    """Leading eigenpairs of a covariance matrix."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    total_variance: float
    degenerate: bool = False

    @property
    def n_prime(self) -> int:
        return self.eigenvalues.size


def truncate(sigma, var_explained: float) -> Truncation:
    """Smallest set of leading components explaining `var_explained` of the variance.

    Only strictly positive eigenvalues are ever kept. A zero matrix yields one
    zero-variance component with ``degenerate=True``.
    """
    if not 0 < var_explained <= 1:
        raise ValueError("var_explained must lie in (0, 1]")
    vals, vecs = sorted_eigh(np.asarray(sigma, dtype=float))
    total = float(vals.sum())
    n_pos = int(np.count_nonzero(vals > 0))
    if total <= 0 or n_pos == 0:
        return Truncation(np.zeros(1), vecs[:, :1], 0.0, degenerate=True)
    frac = np.cumsum(vals) / total
    k = int(np.searchsorted(frac, var_explained * (1 - 1e-12))) + 1
    k = min(k, n_pos)
    return Truncation(vals[:k].copy(), vecs[:, :k].copy(), total)


@dataclass(frozen=True, eq=False)
class PosteriorState:
    """Score-space view of one MCEM iterate.

    ``g(z) = mean_values + directions @ z`` is the clr function for scores
    ``z``; draws lift to coefficients as ``nu + eigenvectors @ z``.
    """

    nu: np.ndarray = field(repr=False)
    eigenvectors: np.ndarray = field(repr=False)
    variances: np.ndarray
    mean_values: np.ndarray = field(repr=False)
    directions: np.ndarray = field(repr=False)
    cell_width: float
    degenerate: bool = False

    @classmethod
    def from_parameters(cls, nu, sigma, basis: Basis, var_explained: float) -> "PosteriorState":
        return cls.from_truncation(nu, truncate(sigma, var_explained), basis)

    @classmethod
    def from_truncation(cls, nu, trunc: Truncation, basis: Basis) -> "PosteriorState":
        nu = np.asarray(nu, dtype=float)
        return cls(
            nu=nu,
            eigenvectors=trunc.eigenvectors,
            variances=trunc.eigenvalues,
            mean_values=basis.matrix @ nu,
            directions=basis.matrix @ trunc.eigenvectors,
            cell_width=basis.grid.width,
            degenerate=trunc.degenerate,
        )

    @property
    def n_components(self) -> int:
        return self.variances.size

    def clr_values(self, z) -> np.ndarray:
        return self.mean_values + self.directions @ np.asarray(z, dtype=float)


def _prior_precision(state: PosteriorState) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.where(np.isinf(state.variances), 0.0, 1.0 / state.variances)


def log_posterior_unnormalized(z, counts, state: PosteriorState) -> float:
    """Log of the unnormalized score posterior.

    ``sum_j g(x_j) - m * log(int exp(g)) - sum_k z_k^2 / (2 sigma_k^2)``
    with no additive constant. Infinite prior variances contribute nothing
    to the last term.
    """
    z = np.asarray(z, dtype=float)
    counts = np.asarray(counts, dtype=float)
    g = state.clr_values(z)
    m = counts.sum()
    value = counts @ g
    if m > 0:
        # non-finite g propagates as nan; callers reject it
        with np.errstate(invalid="ignore"):
            value -= m * (np.logaddexp.reduce(g) + math.log(state.cell_width))
    return float(value - 0.5 * np.sum(z * z * _prior_precision(state)))


def _cell_probabilities(g: np.ndarray) -> np.ndarray:
    p = np.exp(g - g.max())
    return p / p.sum()


def log_posterior_gradient(z, counts, state: PosteriorState) -> np.ndarray:
    """Gradient of :func:`log_posterior_unnormalized` with respect to `z`.

    Raises
    ------
    ValueError
        If a retained variance is zero.
    """
    if np.any(state.variances <= 0):
        raise ValueError("gradient undefined for zero retained variance")
    z = np.asarray(z, dtype=float)
    counts = np.asarray(counts, dtype=float)
    m = counts.sum()
    resid = counts
    if m > 0:
        # m * <f_z, e_k> summed against the directions is m * B' p
        resid = counts - m * _cell_probabilities(state.clr_values(z))
    return state.directions.T @ resid - z * _prior_precision(state)


def log_posterior_hessian(z, counts, state: PosteriorState) -> np.ndarray:
    """Hessian of the log posterior; negative definite for finite variances."""
    z = np.asarray(z, dtype=float)
    m = float(np.sum(counts))
    b = state.directions
    h = -np.diag(_prior_precision(state))
    if m > 0:
        p = _cell_probabilities(state.clr_values(z))
        bp = b.T @ p
        h -= m * ((b.T * p) @ b - np.outer(bp, bp))
    return h


@dataclass(frozen=True, eq=False)
class ModeResult:
    z: np.ndarray
    log_posterior: float
    n_steps: int
    converged: bool


def find_mode(counts, state: PosteriorState, cfg: McemConfig) -> ModeResult:
    """Maximize the score posterior from ``z = 0`` with Armijo backtracking.

    The ascent direction is the Newton direction (``cfg.mode_method ==
    "newton"``) or the plain gradient. Every accepted step increases the
    objective, so the returned point is the best iterate visited.

    Raises
    ------
    ImproperPriorError
        If a retained prior variance is infinite.
    NumericalError
        If the objective is non-finite at some iterate.
    """
    variances = state.variances
    if np.any(~np.isfinite(variances)):
        raise ImproperPriorError(
            "posterior mode requires finite prior variances; an infinite "
            "variance gives an improper prior whose posterior may have no mode"
        )
    if np.any(variances <= 0):
        raise ValueError("prior variances must be positive")
    counts = np.asarray(counts, dtype=float)
    k = state.n_components
    z = np.zeros(k)
    if counts.sum() == 0:
        return ModeResult(z, log_posterior_unnormalized(z, counts, state), 0, True)

    newton = cfg.mode_method == "newton"
    f = log_posterior_unnormalized(z, counts, state)
    step = 1.0
    for it in range(cfg.mode_max_steps):
        grad = log_posterior_gradient(z, counts, state)
        if not np.all(np.isfinite(grad)) or not math.isfinite(f):
            raise NumericalError(f"non-finite log posterior at mode-search step {it}")
        if np.linalg.norm(grad) < cfg.mode_tol:
            return ModeResult(z, f, it, True)
        direction = grad
        if newton:
            try:
                fac = cho_factor(-log_posterior_hessian(z, counts, state))
                direction = cho_solve(fac, grad)
            except np.linalg.LinAlgError:
                direction = grad
            step = 1.0
        else:
            step = min(2.0 * step, 1e8)
        slope = float(grad @ direction)
        # Newton decrement: predicted gain is slope / 2; scale-free unlike |grad|.
        # Gains below a few ulps of f cannot be realized, so stop there too.
        if newton and slope < max(cfg.mode_tol**2, _RESOLUTION * max(1.0, abs(f))):
            return ModeResult(z, f, it, True)
        for _ in range(_MAX_BACKTRACKS):
            z_new = z + step * direction
            f_new = log_posterior_unnormalized(z_new, counts, state)
            if math.isfinite(f_new) and f_new >= f + _ARMIJO_C * step * slope:
                break
            step *= 0.5
        else:
            # no ascent possible at floating-point resolution
            return ModeResult(z, f, it, False)
        if f_new == f:
            return ModeResult(z, f, it, bool(np.linalg.norm(grad) < cfg.mode_tol) or newton)
        z, f = z_new, f_new
    grad = log_posterior_gradient(z, counts, state)
    converged = bool(np.linalg.norm(grad) < cfg.mode_tol)
    if not converged:
        log.warning("mode search stopped after %d steps (|grad|=%.3g)",
                    cfg.mode_max_steps, np.linalg.norm(grad))
    return ModeResult(z, f, cfg.mode_max_steps, converged)


@dataclass(frozen=True, eq=False)
class GroupDraws:
    """Importance draws for one group.

    `z` holds score draws (r, K); `weights` are normalized to sum to one.
    """

    z: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    mode: np.ndarray
    ess: float

    @property
    def r(self) -> int:
        return self.weights.size


@dataclass(frozen=True, eq=False)
class EStepDraws:
    """Draws for all groups plus the map ``theta = offset + lift @ z``."""

    offset: np.ndarray = field(repr=False)
    lift: np.ndarray = field(repr=False)
    groups: list[GroupDraws] = field(repr=False)

    def thetas(self, i: int) -> np.ndarray:
        """Coefficient draws of group `i`, shape (r, N)."""
        return self.offset + self.groups[i].z @ self.lift.T

    @property
    def mean_ess(self) -> float:
        return float(np.mean([g.ess for g in self.groups]))

    @property
    def total_draws(self) -> int:
        return int(sum(g.r for g in self.groups))


def _log_posterior_batch(z: np.ndarray, counts: np.ndarray, state: PosteriorState) -> np.ndarray:
    g = state.mean_values + z @ state.directions.T
    m = counts.sum()
    out = g @ counts
    if m > 0:
        out -= m * (logsumexp(g, axis=1) + math.log(state.cell_width))
    return out - 0.5 * (z * z) @ _prior_precision(state)


def importance_sample(counts, state: PosteriorState, cfg: McemConfig, r: int,
                      rng: np.random.Generator, mode: np.ndarray | None = None) -> GroupDraws:
    """Draw ``r`` score vectors from ``N(z*, lam * diag(sigma^2))`` with weights.

    Log-weights are target minus proposal log densities, both unnormalized,
    and are normalized with log-sum-exp.
    """
    if r < 1:
        raise ValueError("need at least one draw")
    counts = np.asarray(counts, dtype=float)
    if mode is None:
        mode = find_mode(counts, state, cfg).z
    scale = np.sqrt(cfg.lam * state.variances)
    eps = rng.standard_normal((r, state.n_components))
    z = mode + eps * scale
    log_w = _log_posterior_batch(z, counts, state) + 0.5 * np.sum(eps * eps, axis=1)
    if not np.all(np.isfinite(log_w)):
        raise NumericalError("non-finite importance log-weight")
    w = np.exp(log_w - logsumexp(log_w))
    w /= w.sum()
    return GroupDraws(z, w, np.asarray(mode), float(1.0 / np.sum(w * w)))


def _map(fn, items, n_jobs: int) -> list:
    if n_jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, items))


def e_step(counts: np.ndarray, state: PosteriorState, cfg: McemConfig, r: int,
           iteration: int) -> EStepDraws:
    """Mode search and importance sampling for every group."""
    k = state.n_components

    def one(i):
        if state.degenerate:
            return GroupDraws(np.zeros((1, k)), np.ones(1), np.zeros(k), 1.0)
        rng = group_rng(cfg.seed, iteration, i)
        return importance_sample(counts[i], state, cfg, r, rng)

    groups = _map(one, range(counts.shape[0]), cfg.n_jobs)
    return EStepDraws(state.nu, state.eigenvectors, groups)


def m_step(draws: EStepDraws, basis: Basis | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Weighted mean and covariance of the lifted draws over all groups.

    Weights are normalized within each group, and groups count equally.
    Since ``theta - nu_new = lift @ (z - z_bar)``, the moments are formed in
    score space and lifted once. With `basis`, the result is projected onto
    the integrate-to-zero subspace.
    """
    n = len(draws.groups)
    z_bar = sum(g.weights @ g.z for g in draws.groups) / n
    k = z_bar.size
    s = np.zeros((k, k))
    for g in draws.groups:
        c = g.z - z_bar
        s += (c.T * g.weights) @ c
    s /= n
    nu = draws.offset + draws.lift @ z_bar
    sigma = draws.lift @ s @ draws.lift.T
    sigma = 0.5 * (sigma + sigma.T)
    if basis is not None:
        nu, sigma = enforce_constraint(basis, nu, sigma)
    return nu, sigma


@dataclass
class McemTrace:
    """Per-iteration diagnostics."""

    nu_change: list[float] = field(default_factory=list)
    sigma_change: list[float] = field(default_factory=list)
    n_prime: list[int] = field(default_factory=list)
    draws: list[int] = field(default_factory=list)
    mean_ess: list[float] = field(default_factory=list)

    def append(self, nu_change, sigma_change, n_prime, draws, mean_ess):
        self.nu_change.append(float(nu_change))
        self.sigma_change.append(float(sigma_change))
        self.n_prime.append(int(n_prime))
        self.draws.append(int(draws))
        self.mean_ess.append(float(mean_ess))

    def __len__(self):
        return len(self.nu_change)

    def rows(self) -> list[tuple]:
        return [(h + 1, self.nu_change[h], self.sigma_change[h], self.n_prime[h],
                 self.draws[h], self.mean_ess[h]) for h in range(len(self))]


@dataclass(frozen=True, eq=False)
class FitResult:
    """Outcome of :func:`fit`.

    `pca` keeps the components retained at `var_explained` and carries the
    predicted scores of every group.
    """

    model: LatentDensityModel
    pca: PCARepresentation
    trace: McemTrace
    converged: bool
    iterations: int
    group_ids: list[str] | None = None

    def predicted_clr(self) -> np.ndarray:
        return self.pca.clr_predictions()

    def predicted_densities(self) -> list[Density]:
        return [clr_inverse(GridFunction(self.pca.grid, g)) for g in self.predicted_clr()]


def predict_scores(model: LatentDensityModel, counts, var_explained: float = 1.0,
                   cfg: McemConfig | None = None) -> tuple[np.ndarray, Density]:
    """Posterior-mode scores of one group under fitted parameters.

    Scores refer to the components kept by ``truncate(model.sigma,
    var_explained)``; the density is the corresponding reconstruction.
    """
    cfg = cfg or McemConfig()
    counts = np.asarray(counts)
    if counts.shape != (model.grid.n_cells,):
        raise ValueError(f"counts must have length {model.grid.n_cells}")
    state = PosteriorState.from_parameters(model.nu, model.sigma, model.basis, var_explained)
    if state.degenerate or counts.sum() == 0:
        z = np.zeros(state.n_components)
    else:
        z = find_mode(counts, state, cfg).z
    return z, clr_inverse(GridFunction(model.grid, state.clr_values(z)))


def fit_counts(counts, basis: Basis, init: tuple, cfg: McemConfig,
               group_ids: list[str] | None = None) -> FitResult:
    """Run MCEM on per-group cell counts, shape ``(n_groups, n_cells)``."""
    counts = np.asarray(counts)
    if counts.ndim != 2 or counts.shape[1] != basis.grid.n_cells:
        raise ValueError(f"counts must have shape (n, {basis.grid.n_cells})")
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    nu, sigma = enforce_constraint(basis, *init)
    trace = McemTrace()
    converged = False
    h = 0
    for h in range(1, cfg.max_iterations + 1):
        trunc = truncate(sigma, cfg.var_explained)
        state = PosteriorState.from_truncation(nu, trunc, basis)
        r = cfg.mc_growth * h
        draws = e_step(counts, state, cfg, r, h)
        nu_new, sigma_new = m_step(draws, basis)
        d_nu = float(np.linalg.norm(nu_new - nu))
        d_sigma = float(np.linalg.norm(sigma_new - sigma, "fro"))
        trace.append(d_nu, d_sigma, trunc.n_prime, draws.total_draws, draws.mean_ess)
        log.debug("iter %d: dnu=%.3g dsigma=%.3g N'=%d ess=%.1f",
                  h, d_nu, d_sigma, trunc.n_prime, draws.mean_ess)
        nu, sigma = nu_new, sigma_new
        if d_nu < cfg.epsilon and d_sigma < cfg.epsilon:
            converged = True
            break
    if not converged:
        log.warning("MCEM did not converge within %d iterations", cfg.max_iterations)

    model = LatentDensityModel(basis, nu, sigma)
    trunc = truncate(model.sigma, cfg.var_explained)
    state = PosteriorState.from_truncation(model.nu, trunc, basis)

    def score(i):
        if state.degenerate or counts[i].sum() == 0:
            return np.zeros(state.n_components)
        return find_mode(counts[i], state, cfg).z

    scores = np.vstack(_map(score, range(counts.shape[0]), cfg.n_jobs))
    pca = PCARepresentation(
        grid=basis.grid,
        mean=model.mean,
        eigenfunctions=state.directions.T,
        eigenvalues=trunc.eigenvalues,
        scores=scores,
        total_variance=trunc.total_variance,
        eigenvectors=trunc.eigenvectors,
    )
    return FitResult(model, pca, trace, converged, h, group_ids)


def fit(data: SampleSet, basis: Basis, init: tuple, cfg: McemConfig) -> FitResult:
    """Estimate the latent density model from grouped samples.

    Parameters
    ----------
    data : SampleSet
    basis : Basis
        Orthonormal basis on the same grid as `data`.
    init : (nu0, sigma0)
        Starting values, e.g. from :func:`~ldpca.initialization.init_from_kde`.
    cfg : McemConfig

    Returns
    -------
    FitResult
        Check ``converged``: hitting ``max_iterations`` is reported there.
    """
    if data.grid != basis.grid:
        raise ValueError("sample grid and basis grid differ")
    if not basis.is_orthonormal:
        raise ValueError("MCEM requires an orthonormal basis")
    return fit_counts(data.counts(), basis, init, cfg, data.group_ids)
