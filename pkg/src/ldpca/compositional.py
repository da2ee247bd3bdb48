"""PCA for count compositions (densities with respect to counting measure).

The ``D`` categories are treated as a grid of ``D`` unit-width cells, so
integrals become sums and the MCEM engine runs unchanged on the orthonormal
Egozcue basis of the sum-zero hyperplane.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .function_space import Basis, DomainError, Grid, explicit_basis
from .initialization import init_identity
from .mcem import FitResult, McemConfig, fit_counts

__all__ = [
    "Composition",
    "CountData",
    "clr_discrete",
    "clr_discrete_inverse",
    "aitchison_inner_product",
    "egozcue_basis",
    "composition_grid",
    "composition_basis",
    "fit_compositional",
    "mean_composition",
    "direction_compositions",
]


@dataclass(frozen=True, eq=False)
class Composition:
    """Strictly positive probability vector."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float).ravel()
        if p.size < 2:
            raise ValueError("a composition needs at least 2 parts")
        if np.any(~(p > 0)):
            raise DomainError(f"part {int(np.argmin(p))} is not positive")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"parts sum to {p.sum()!r}, not 1")
        object.__setattr__(self, "probs", p)

    def __len__(self):
        return self.probs.size


def clr_discrete(pi) -> np.ndarray:
    """``log(pi) - mean(log(pi))``; positivity required, scale irrelevant."""
    p = np.asarray(pi.probs if isinstance(pi, Composition) else pi, dtype=float)
    bad = np.flatnonzero(~(p > 0))
    if bad.size:
        raise DomainError(f"category {int(bad[0])} has non-positive probability {p[bad[0]]!r}")
    lp = np.log(p)
    return lp - lp.mean()


def clr_discrete_inverse(rho) -> np.ndarray:
    """Closure of ``exp(rho)``."""
    r = np.asarray(rho, dtype=float)
    e = np.exp(r - r.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def aitchison_inner_product(p, q) -> float:
    """``1/(2D) sum_k sum_l log(p_k/p_l) log(q_k/q_l)``, evaluated literally."""
    lp = np.log(np.asarray(p, dtype=float))
    lq = np.log(np.asarray(q, dtype=float))
    dp = lp[:, None] - lp[None, :]
    dq = lq[:, None] - lq[None, :]
    return float(np.sum(dp * dq) / (2 * lp.size))


def egozcue_basis(d: int) -> np.ndarray:
    """Orthonormal basis of ``{x in R^d : sum(x) = 0}``, one vector per row.

    Row ``k - 1`` is ``sqrt(k/(k+1)) * (1/k, ..., 1/k, -1, 0, ..., 0)`` with
    ``k`` leading entries.
    """
    if int(d) != d or d < 2:
        raise ValueError(f"need at least 2 categories, got {d}")
    d = int(d)
    out = np.zeros((d - 1, d))
    for k in range(1, d):
        out[k - 1, :k] = 1.0 / k
        out[k - 1, k] = -1.0
        out[k - 1] *= np.sqrt(k / (k + 1.0))
    return out


def composition_grid(d: int) -> Grid:
    return Grid(0.0, float(d), int(d))


def composition_basis(d: int) -> Basis:
    """Egozcue basis as functions on ``d`` unit cells."""
    return explicit_basis(composition_grid(d), egozcue_basis(d))


@dataclass(frozen=True, eq=False)
class CountData:
    """Category counts per group, shape ``(n_groups, D)``."""

    counts: np.ndarray = field(repr=False)
    categories: list[str] | None = None
    group_ids: list[str] | None = None

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[1] < 2:
            raise ValueError("counts must be a 2-d array with at least 2 categories")
        if not np.all(np.equal(np.mod(c, 1), 0)) or np.any(c < 0):
            raise ValueError("counts must be nonnegative integers")
        c = c.astype(np.int64)
        empty = np.flatnonzero(c.sum(axis=1) == 0)
        if empty.size:
            raise ValueError(f"group {int(empty[0])} has no observations")
        cats = self.categories or [str(k + 1) for k in range(c.shape[1])]
        ids = self.group_ids or [str(i + 1) for i in range(c.shape[0])]
        if len(cats) != c.shape[1] or len(ids) != c.shape[0]:
            raise ValueError("labels do not match the counts shape")
        object.__setattr__(self, "counts", c)
        object.__setattr__(self, "categories", [str(x) for x in cats])
        object.__setattr__(self, "group_ids", [str(x) for x in ids])

    @property
    def n_categories(self) -> int:
        return self.counts.shape[1]

    @classmethod
    def from_records(cls, records: Sequence[tuple], categories: Sequence[str] | None = None) -> "CountData":
        """From ``(group_id, category, count)`` triples; repeated pairs add up."""
        groups: dict[str, dict[str, int]] = {}
        seen: list[str] = []
        for gid, cat, cnt in records:
            gid, cat = str(gid), str(cat)
            if cat not in seen:
                seen.append(cat)
            g = groups.setdefault(gid, {})
            g[cat] = g.get(cat, 0) + int(cnt)
        cats = list(categories) if categories is not None else seen
        unknown = sorted(set(seen) - set(cats))
        if unknown:
            raise ValueError(f"unknown categories: {unknown}")
        idx = {c: k for k, c in enumerate(cats)}
        counts = np.zeros((len(groups), len(cats)), dtype=np.int64)
        for i, g in enumerate(groups.values()):
            for cat, cnt in g.items():
                counts[i, idx[cat]] = cnt
        return cls(counts, cats, list(groups))


def fit_compositional(data: CountData, cfg: McemConfig) -> FitResult:
    """MCEM on the Egozcue basis from ``nu = 0``, ``sigma = I``.

    Zero counts need no replacement: they simply contribute nothing to the
    linear term of the likelihood.
    """
    basis = composition_basis(data.n_categories)
    return fit_counts(data.counts, basis, init_identity(basis), cfg, data.group_ids)


def mean_composition(result: FitResult) -> np.ndarray:
    return clr_discrete_inverse(result.pca.mean.values)


def direction_compositions(result: FitResult) -> dict[str, np.ndarray]:
    """Compositions for each eigenvector and for ``mean +- sd_k * phi_k``."""
    mu = result.pca.mean.values
    phi = result.pca.eigenfunctions
    sd = np.sqrt(result.pca.eigenvalues)[:, None]
    return {
        "direction": clr_discrete_inverse(phi),
        "plus": clr_discrete_inverse(mu + sd * phi),
        "minus": clr_discrete_inverse(mu - sd * phi),
    }
