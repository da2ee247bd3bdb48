"""Reading inputs and writing model, PCA, trace and study files.

Grid-indexed CSVs start with a ``# {"lower": ..., "upper": ..., "n_cells": ...}``
comment line. Floats are written with 17 significant digits so that
outputs round-trip and identical runs give identical bytes.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .function_space import Basis, Grid, GridFunction, explicit_basis, make_basis
from .model import LatentDensityModel, PCARepresentation

__all__ = [
    "InputError",
    "fmt",
    "read_samples_csv",
    "read_counts_csv",
    "write_grid_function",
    "read_grid_function",
    "write_grid_table",
    "save_model",
    "load_model",
    "write_pca",
    "write_densities",
    "write_trace",
    "write_rows",
]


class InputError(ValueError):
    """Malformed or out-of-range input file."""


def fmt(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x) if x == 0 else f"{x:.17g}"


def _open_rows(path) -> tuple[list[str], Iterable[tuple[int, list[str]]]]:
    text = Path(path).read_text()
    lines = [(n, ln) for n, ln in enumerate(text.splitlines(), start=1)
             if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise InputError(f"{path}: file is empty")
    header_no, header_line = lines[0]
    header = [h.strip() for h in next(csv.reader([header_line]))]
    rows = ((n, [c.strip() for c in next(csv.reader([ln]))]) for n, ln in lines[1:])
    return header, rows


def read_samples_csv(path, lower: float | None = None, upper: float | None = None):
    """Read ``group_id,value`` rows.

    Returns
    -------
    group_ids : list of str
        One entry per row.
    values : ndarray

    Raises
    ------
    InputError
        On a wrong header, an unparseable row (with its line number), no
        data rows, or values outside ``[lower, upper]``.
    """
    header, rows = _open_rows(path)
    if header[:2] != ["group_id", "value"]:
        raise InputError(f"{path}: expected header 'group_id,value', got {','.join(header)!r}")
    ids, vals, line_nos = [], [], []
    for n, row in rows:
        if len(row) < 2 or not row[0]:
            raise InputError(f"{path}:{n}: expected 'group_id,value', got {','.join(row)!r}")
        try:
            v = float(row[1])
        except ValueError:
            raise InputError(f"{path}:{n}: value {row[1]!r} is not a number") from None
        if not math.isfinite(v):
            raise InputError(f"{path}:{n}: value {row[1]!r} is not finite")
        ids.append(row[0])
        vals.append(v)
        line_nos.append(n)
    if not vals:
        raise InputError(f"{path}: no data rows")
    vals = np.array(vals)
    lo = vals.min() if lower is None else lower
    hi = vals.max() if upper is None else upper
    out = np.flatnonzero((vals < lo) | (vals > hi))
    if out.size:
        listed = ", ".join(f"line {line_nos[i]}: {vals[i]:g}" for i in out[:10])
        raise InputError(f"{path}: {out.size} value(s) outside [{lo}, {hi}] ({listed})")
    return ids, vals


def read_counts_csv(path, categories: Sequence[str] | None = None) -> list[tuple[str, str, int]]:
    """Read ``group_id,category,count`` rows into triples."""
    header, rows = _open_rows(path)
    if header[:3] != ["group_id", "category", "count"]:
        raise InputError(
            f"{path}: expected header 'group_id,category,count', got {','.join(header)!r}"
        )
    allowed = set(categories) if categories is not None else None
    out = []
    for n, row in rows:
        if len(row) < 3 or not row[0]:
            raise InputError(f"{path}:{n}: expected 'group_id,category,count'")
        gid, cat, cnt = row[:3]
        if not cat or (allowed is not None and cat not in allowed):
            raise InputError(f"{path}:{n}: malformed category label {cat!r}")
        try:
            c = int(cnt)
        except ValueError:
            raise InputError(f"{path}:{n}: count {cnt!r} is not an integer") from None
        if c < 0:
            raise InputError(f"{path}:{n}: negative count {c}")
        out.append((gid, cat, c))
    if not out:
        raise InputError(f"{path}: no data rows")
    return out


def _grid_header(grid: Grid) -> str:
    return "# " + json.dumps(grid.to_dict(), sort_keys=True) + "\n"


def write_grid_table(path, grid: Grid, columns: dict[str, np.ndarray]) -> None:
    """Cell-indexed table: ``cell_midpoint`` followed by the given columns."""
    with open(path, "w", newline="") as fh:
        fh.write(_grid_header(grid))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_midpoint", *columns])
        cols = [np.asarray(v, dtype=float) for v in columns.values()]
        for k, x in enumerate(grid.midpoints):
            w.writerow([fmt(x), *(fmt(c[k]) for c in cols)])


def write_grid_function(path, f: GridFunction) -> None:
    write_grid_table(path, f.grid, {"value": f.values})


def read_grid_function(path) -> GridFunction:
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise InputError(f"{path}: missing grid header line")
        grid = Grid.from_dict(json.loads(first[1:]))
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["cell_midpoint", "value"]:
            raise InputError(f"{path}: expected columns cell_midpoint,value")
        values = [float(r[1]) for r in reader if r]
    return GridFunction(grid, values)


def save_model(path, model: LatentDensityModel, metadata: dict | None = None) -> None:
    """JSON with grid, basis kind, ``nu``, row-major ``sigma`` and metadata."""
    doc = {
        "grid": model.grid.to_dict(),
        "basis_kind": model.basis.kind,
        "n_basis": model.basis.size,
        "nu": [float(v) for v in model.nu],
        "sigma": [float(v) for v in model.sigma.ravel()],
        "metadata": metadata or {},
    }
    if model.basis.kind == "explicit":
        doc["basis_functions"] = [[float(v) for v in col] for col in model.basis.matrix.T]
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_model(path) -> tuple[LatentDensityModel, dict]:
    doc = json.loads(Path(path).read_text())
    grid = Grid.from_dict(doc["grid"])
    if doc["basis_kind"] == "normalized_indicator":
        basis: Basis = make_basis(grid)
    else:
        basis = explicit_basis(grid, doc["basis_functions"])
    n = basis.size
    sigma = np.array(doc["sigma"], dtype=float).reshape(n, n)
    return LatentDensityModel(basis, doc["nu"], sigma), doc.get("metadata", {})


def write_pca(outdir, pca: PCARepresentation, group_ids: Sequence[str],
              grid_tables: bool = True) -> None:
    """``pca_mean.csv``, ``pca_eigenfunctions.csv``, ``eigenvalues.csv``, ``scores.csv``.

    With ``grid_tables=False`` only the last two are written.
    """
    outdir = Path(outdir)
    if grid_tables:
        write_grid_function(outdir / "pca_mean.csv", pca.mean)
        write_grid_table(
            outdir / "pca_eigenfunctions.csv", pca.grid,
            {f"phi_{k + 1}": pca.eigenfunctions[k] for k in range(pca.n_components)},
        )
    ve = pca.variance_explained
    write_rows(
        outdir / "eigenvalues.csv",
        ["component", "eigenvalue", "variance_explained", "cumulative_variance_explained"],
        [(k + 1, fmt(pca.eigenvalues[k]),
          fmt(pca.eigenvalues[k] / pca.total_variance if pca.total_variance > 0 else 0.0),
          fmt(ve[k])) for k in range(pca.n_components)],
    )
    write_rows(
        outdir / "scores.csv",
        ["group_id", *(f"z_{k + 1}" for k in range(pca.n_components))],
        [(gid, *(fmt(v) for v in row)) for gid, row in zip(group_ids, pca.scores)],
    )


def write_densities(path, grid: Grid, group_ids: Sequence[str], densities: np.ndarray) -> None:
    """One row per group, one column per cell (headed by its midpoint)."""
    with open(path, "w", newline="") as fh:
        fh.write(_grid_header(grid))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group_id", *(fmt(x) for x in grid.midpoints)])
        for gid, row in zip(group_ids, densities):
            w.writerow([gid, *(fmt(v) for v in row)])


def write_trace(path, trace) -> None:
    write_rows(
        path,
        ["h", "nu_change", "sigma_change_frobenius", "n_prime", "draws", "mean_ess"],
        [(h, fmt(a), fmt(b), n, d, fmt(e)) for h, a, b, n, d, e in trace.rows()],
    )


def write_rows(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        for row in rows:
            w.writerow(list(row))
