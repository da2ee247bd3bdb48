"""Piecewise-constant functions on a compact interval.

Everything here lives on an equidistant cell grid: a function is stored as
one value per cell, integrals are cell sums times the cell width, and the
normalized indicator basis is orthonormal by construction. Densities and
centered log-ratio (clr) functions are the two constrained flavours of a
:class:`GridFunction`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "DomainError",
    "GridMismatchError",
    "Grid",
    "GridFunction",
    "Density",
    "ClrFunction",
    "Basis",
    "integrate",
    "inner_product",
    "clr",
    "clr_inverse",
    "bayes_inner_product",
    "bayes_perturb",
    "bayes_power",
    "make_basis",
    "explicit_basis",
    "expand",
    "project",
]

DENSITY_TOL = 1e-10
CLR_TOL = 1e-10


class DomainError(ValueError):
    """A value lies outside the domain of an operation."""


class GridMismatchError(ValueError):
    """Two objects that must share a grid do not."""


@dataclass(frozen=True)
class Grid:
    """Equidistant partition of ``[lower, upper]`` into ``n_cells`` cells."""

    lower: float
    upper: float
    n_cells: int

    def __post_init__(self):
        lower, upper = float(self.lower), float(self.upper)
        if not (np.isfinite(lower) and np.isfinite(upper)):
            raise ValueError("grid bounds must be finite")
        if upper <= lower:
            raise ValueError(f"upper ({upper}) must exceed lower ({lower})")
        if int(self.n_cells) != self.n_cells or self.n_cells < 2:
            raise ValueError(f"n_cells must be an integer >= 2, got {self.n_cells}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "n_cells", int(self.n_cells))

    @property
    def length(self) -> float:
        return self.upper - self.lower

    @property
    def width(self) -> float:
        """Cell width."""
        return self.length / self.n_cells

    @property
    def midpoints(self) -> np.ndarray:
        return self.lower + (np.arange(self.n_cells) + 0.5) * self.width

    @property
    def edges(self) -> np.ndarray:
        return self.lower + np.arange(self.n_cells + 1) * self.width

    def cell_index(self, x) -> np.ndarray:
        """Index of the cell containing each value of `x`.

        The right end point belongs to the last cell.

        Raises
        ------
        DomainError
            If any value lies outside ``[lower, upper]``.
        """
        x = np.asarray(x, dtype=float)
        bad = ~((x >= self.lower) & (x <= self.upper))
        if np.any(bad):
            offenders = np.unique(x[bad])[:10]
            raise DomainError(
                f"{int(bad.sum())} value(s) outside [{self.lower}, {self.upper}]: "
                f"{offenders.tolist()}"
            )
        idx = np.floor((x - self.lower) / self.width).astype(np.int64)
        return np.clip(idx, 0, self.n_cells - 1)

    def counts(self, x) -> np.ndarray:
        """Number of values of `x` falling in each cell."""
        return np.bincount(self.cell_index(x).ravel(), minlength=self.n_cells)

    def to_dict(self) -> dict:
        return {"lower": self.lower, "upper": self.upper, "n_cells": self.n_cells}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls(float(d["lower"]), float(d["upper"]), int(d["n_cells"]))


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Real function with one value per grid cell."""

    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float).ravel()
        if values.shape != (self.grid.n_cells,):
            raise ValueError(
                f"expected {self.grid.n_cells} values, got {values.shape[0]}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("grid function values must be finite")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        self._validate()

    def _validate(self):
        pass

    def _check_grid(self, other: "GridFunction"):
        if other.grid != self.grid:
            raise GridMismatchError(f"{self.grid} != {other.grid}")

    def __add__(self, other):
        if isinstance(other, GridFunction):
            self._check_grid(other)
            return GridFunction(self.grid, self.values + other.values)
        return GridFunction(self.grid, self.values + float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, GridFunction):
            self._check_grid(other)
            return GridFunction(self.grid, self.values - other.values)
        return GridFunction(self.grid, self.values - float(other))

    def __mul__(self, other):
        if isinstance(other, GridFunction):
            self._check_grid(other)
            return GridFunction(self.grid, self.values * other.values)
        return GridFunction(self.grid, self.values * float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return GridFunction(self.grid, -self.values)

    def __len__(self):
        return self.grid.n_cells


class Density(GridFunction):
    """Strictly positive grid function integrating to one."""

    def _validate(self):
        bad = np.flatnonzero(self.values <= 0)
        if bad.size:
            raise DomainError(
                f"density must be strictly positive; cell {int(bad[0])} has "
                f"value {self.values[bad[0]]!r}"
            )
        total = integrate(self)
        if abs(total - 1.0) > DENSITY_TOL:
            raise ValueError(f"density integrates to {total!r}, not 1")


class ClrFunction(GridFunction):
    """Grid function integrating to zero (an element of L2_0)."""

    def _validate(self):
        total = integrate(self)
        scale = max(1.0, self.grid.width * float(np.abs(self.values).sum()))
        if abs(total) > CLR_TOL * scale:
            raise ValueError(f"clr function integrates to {total!r}, not 0")


def integrate(f: GridFunction) -> float:
    """Midpoint rule on the cells; exact for piecewise-constant `f`."""
    return float(f.grid.width * np.sum(f.values))


def inner_product(f: GridFunction, g: GridFunction) -> float:
    """L2 inner product of two functions on the same grid."""
    f._check_grid(g)
    return float(f.grid.width * np.dot(f.values, g.values))


def _positive_log(f: GridFunction) -> np.ndarray:
    bad = np.flatnonzero(f.values <= 0)
    if bad.size:
        k = int(bad[0])
        raise DomainError(
            f"log undefined: cell {k} (midpoint {f.grid.midpoints[k]:.6g}) has "
            f"non-positive value {f.values[k]!r}"
        )
    return np.log(f.values)


def clr(f: GridFunction) -> ClrFunction:
    """Centered log-ratio transform of a positive function.

    Any positive multiple of `f` gives the same result.
    """
    logf = _positive_log(f)
    return ClrFunction(f.grid, logf - logf.mean())


def clr_inverse(g: GridFunction) -> Density:
    """Back-transform ``exp(g) / integral(exp(g))``.

    Constant shifts of `g` do not change the result, so the maximum is
    subtracted before exponentiating.
    """
    v = g.values
    log_norm = np.logaddexp.reduce(v) + np.log(g.grid.width)
    return Density(g.grid, np.exp(v - log_norm))


def bayes_inner_product(f1: GridFunction, f2: GridFunction) -> float:
    """Bayes-space inner product from its double-integral definition.

    ``1/(2|I|) iint log(f1(x)/f1(y)) log(f2(x)/f2(y)) dx dy`` expands to
    ``int a b - (1/|I|) int a int b`` with ``a, b`` the raw logs.
    """
    f1._check_grid(f2)
    a = _positive_log(f1)
    b = _positive_log(f2)
    w = f1.grid.width
    int_ab = w * np.dot(a, b)
    int_a = w * a.sum()
    int_b = w * b.sum()
    return float(int_ab - int_a * int_b / f1.grid.length)


def bayes_perturb(f1: GridFunction, f2: GridFunction) -> Density:
    """Perturbation: the renormalized pointwise product."""
    f1._check_grid(f2)
    return clr_inverse(GridFunction(f1.grid, _positive_log(f1) + _positive_log(f2)))


def bayes_power(alpha: float, f: GridFunction) -> Density:
    """Powering: the renormalized ``f**alpha``."""
    return clr_inverse(GridFunction(f.grid, float(alpha) * _positive_log(f)))


@dataclass(frozen=True, eq=False)
class Basis:
    """Finite set of functions on a grid.

    Attributes
    ----------
    grid : Grid
    kind : {"normalized_indicator", "explicit"}
    matrix : ndarray of shape (n_cells, N)
        Column ``k`` holds the cell values of basis function ``k``.
    """

    grid: Grid
    kind: str
    matrix: np.ndarray = field(repr=False)
    integrals: np.ndarray = field(init=False, repr=False)
    gram: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("normalized_indicator", "explicit"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != self.grid.n_cells or m.shape[1] < 1:
            raise ValueError(
                f"basis matrix must have shape ({self.grid.n_cells}, N), got {m.shape}"
            )
        if not np.all(np.isfinite(m)):
            raise ValueError("basis values must be finite")
        m.flags.writeable = False
        w = self.grid.width
        gram = w * (m.T @ m)
        if self.kind == "normalized_indicator":
            gram = np.eye(m.shape[1])
        integrals = w * m.sum(axis=0)
        try:
            np.linalg.cholesky(gram)
        except np.linalg.LinAlgError:
            raise ValueError("basis functions are linearly dependent") from None
        gram.flags.writeable = False
        integrals.flags.writeable = False
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "gram", gram)
        object.__setattr__(self, "integrals", integrals)

    @property
    def size(self) -> int:
        return self.matrix.shape[1]

    def __len__(self):
        return self.size

    @property
    def functions(self) -> list[GridFunction]:
        return [GridFunction(self.grid, self.matrix[:, k]) for k in range(self.size)]

    @property
    def is_orthonormal(self) -> bool:
        return bool(np.allclose(self.gram, np.eye(self.size), rtol=0, atol=1e-10))

    def constraint_projector(self) -> np.ndarray:
        """Orthogonal projector onto coefficients whose expansion integrates to 0.

        For bases whose functions already integrate to zero this is the
        identity; for equal-integral bases it is ``I - 11'/N``.
        """
        a = self.integrals
        norm2 = float(a @ a)
        eye = np.eye(self.size)
        if norm2 <= 1e-24 * self.size:
            return eye
        return eye - np.outer(a, a) / norm2


def make_basis(grid: Grid) -> Basis:
    """Indicator basis scaled by ``width**-0.5`` so that it is orthonormal."""
    return Basis(grid, "normalized_indicator", np.eye(grid.n_cells) / np.sqrt(grid.width))


def explicit_basis(grid: Grid, functions: Sequence) -> Basis:
    """Basis from given functions (GridFunctions or value arrays)."""
    cols = [f.values if isinstance(f, GridFunction) else np.asarray(f, float) for f in functions]
    return Basis(grid, "explicit", np.column_stack(cols))


def expand(coeffs, basis: Basis) -> GridFunction:
    """``sum_k coeffs[k] * e_k``."""
    c = np.asarray(coeffs, dtype=float)
    if c.shape != (basis.size,):
        raise ValueError(f"expected {basis.size} coefficients, got shape {c.shape}")
    return GridFunction(basis.grid, basis.matrix @ c)


def project(g: GridFunction, basis: Basis) -> np.ndarray:
    """Coefficients of the L2 projection of `g` onto the span of `basis`."""
    if g.grid != basis.grid:
        raise GridMismatchError(f"{g.grid} != {basis.grid}")
    if basis.kind == "normalized_indicator":
        return np.sqrt(basis.grid.width) * g.values.copy()
    rhs = basis.grid.width * (basis.matrix.T @ g.values)
    return np.linalg.solve(basis.gram, rhs)
