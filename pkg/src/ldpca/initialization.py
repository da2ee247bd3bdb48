"""Grouped samples, kernel density estimates and MCEM starting values."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .function_space import Basis, Density, Grid, clr, project
from .model import enforce_constraint

__all__ = [
    "SampleSet",
    "KdeConfig",
    "kde",
    "init_from_kde",
    "init_identity",
]

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Observations ``x_i1, ..., x_im_i`` for each of ``n`` groups."""

    groups: list[np.ndarray] = field(repr=False)
    grid: Grid
    group_ids: list[str] | None = None

    def __post_init__(self):
        groups = [np.asarray(g, dtype=float).ravel() for g in self.groups]
        for i, g in enumerate(groups):
            if g.size < 1:
                raise ValueError(f"group {i} has no observations")
            self.grid.cell_index(g)
        ids = self.group_ids
        if ids is None:
            ids = [str(i + 1) for i in range(len(groups))]
        elif len(ids) != len(groups):
            raise ValueError("group_ids must match the number of groups")
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "group_ids", [str(i) for i in ids])

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([g.size for g in self.groups])

    def counts(self) -> np.ndarray:
        """Per-group cell counts, shape ``(n_groups, n_cells)``."""
        return np.vstack([self.grid.counts(g) for g in self.groups])


@dataclass(frozen=True)
class KdeConfig:
    """Gaussian kernel density estimate settings.

    `bandwidth` is the kernel standard deviation in data units; `floor` is
    the minimum value enforced before renormalizing.
    """

    bandwidth: float
    floor: float = 1e-10

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")
        if not self.floor > 0:
            raise ValueError(f"floor must be positive, got {self.floor}")


def kde(observations, cfg: KdeConfig, grid: Grid) -> Density:
    """Gaussian KDE at cell midpoints, floored and renormalized on the grid.

    Kernel mass outside the interval is discarded by the renormalization;
    there is no boundary reflection.
    """
    x = np.asarray(observations, dtype=float).ravel()
    if x.size < 1:
        raise ValueError("kde needs at least one observation")
    u = (grid.midpoints[:, None] - x[None, :]) / cfg.bandwidth
    vals = np.exp(-0.5 * u * u).sum(axis=1) * (_INV_SQRT_2PI / (x.size * cfg.bandwidth))
    vals = np.maximum(vals, cfg.floor)
    return Density(grid, vals / (grid.width * vals.sum()))


def init_from_kde(data: SampleSet, cfg: KdeConfig, basis: Basis) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance (divisor n) of the clr-KDE basis coefficients."""
    if data.n_groups < 2:
        raise ValueError(
            "init_from_kde needs at least 2 groups; use init_identity for a single group"
        )
    if data.grid != basis.grid:
        raise ValueError("sample grid and basis grid differ")
    coefs = np.vstack([project(clr(kde(g, cfg, data.grid)), basis) for g in data.groups])
    nu = coefs.mean(axis=0)
    centered = coefs - nu
    sigma = centered.T @ centered / coefs.shape[0]
    return enforce_constraint(basis, nu, sigma)


def init_identity(basis: Basis) -> tuple[np.ndarray, np.ndarray]:
    """Zero mean and identity covariance, constraint-projected."""
    n = basis.size
    return enforce_constraint(basis, np.zeros(n), np.eye(n))


def sample_set_from_pairs(group_ids: Sequence, values: Sequence[float], grid: Grid) -> SampleSet:
    """Group flat ``(group_id, value)`` pairs, keeping first-seen group order."""
    order: dict[str, list[float]] = {}
    for gid, v in zip(group_ids, values):
        order.setdefault(str(gid), []).append(float(v))
    return SampleSet([np.array(v) for v in order.values()], grid, list(order))
