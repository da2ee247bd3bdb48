"""Command-line front end.

Commands
--------
fit            latent-density PCA of grouped samples (MCEM)
twostep        PCA of clr-transformed kernel density estimates
compositional  latent PCA of category counts
simulate       simulation study against the two-step baseline

Each command reads flags, optionally layered over a JSON ``--config`` file
(keys are flag names with ``-`` or ``_``), and writes plot-ready CSV/JSON
files to ``--output-dir``. Exit status: 0 success, 1 numerical failure or
non-convergence (flagged in the outputs), 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .compositional import (
    CountData, clr_discrete_inverse, direction_compositions, fit_compositional,
    mean_composition,
)
from .evaluation import two_step_pca
from .function_space import Grid, make_basis
from .initialization import KdeConfig, init_from_kde, kde, sample_set_from_pairs
from .mcem import McemConfig, NumericalError, fit
from .simulation import StudyConfig, rows_as_dicts, run_study, summarize

__all__ = ["main", "build_parser", "DEFAULT_SEED", "FIT_PRESETS"]

log = logging.getLogger("ldpca")

DEFAULT_SEED = 20240101

# Application presets for `fit`; "temperature" is the default.
FIT_PRESETS = {
    "temperature": {"bandwidth": 1.5, "r0": 50, "lam": 1.0, "var_explained": 0.9999},
    "rent": {"bandwidth": 2.0, "r0": 100, "lam": 2.0, "var_explained": 0.99995},
}

_COMMON = {"cells": 200, "epsilon": 1e-3, "max_iter": 200, "seed": DEFAULT_SEED, "jobs": 1}

DEFAULTS = {
    "fit": {**_COMMON, **FIT_PRESETS["temperature"], "preset": "temperature"},
    "twostep": {"cells": 200, "bandwidth": 2.0},
    "compositional": {**_COMMON, "r0": 10, "lam": 1.0, "var_explained": 0.99999},
    "simulate": {**_COMMON, "r0": 10, "lam": 1.0, "var_explained": 0.99999,
                 "replicates": 100, "m_list": [20, 40, 80, 160], "groups": 30},
}


class UsageError(Exception):
    pass


def _add_grid(p):
    p.add_argument("--lower", type=float, help="domain lower bound (default: data minimum)")
    p.add_argument("--upper", type=float, help="domain upper bound (default: data maximum)")
    p.add_argument("--cells", type=int, help="number of grid cells (default 200)")


def _add_mcem(p):
    p.add_argument("--lambda", dest="lam", type=float, help="proposal variance scale")
    p.add_argument("--r0", type=int, help="importance draws per group per iteration index")
    p.add_argument("--var-explained", type=float, help="variance fraction kept in the E-step")
    p.add_argument("--epsilon", type=float, help="convergence threshold")
    p.add_argument("--max-iter", type=int, help="maximum MCEM iterations")
    p.add_argument("--seed", type=int, help=f"random seed (default {DEFAULT_SEED})")
    p.add_argument("--jobs", type=int, help="worker threads/processes")


def _add_io(p, with_input=True):
    if with_input:
        p.add_argument("input", help="input CSV")
    p.add_argument("-o", "--output-dir", default=".", help="directory for outputs")
    p.add_argument("--config", help="JSON file with parameter values; flags take precedence")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ldpca", description="Latent density functional PCA.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="MCEM fit of the latent density model (group_id,value CSV)")
    _add_io(p)
    _add_grid(p)
    p.add_argument("--bandwidth", type=float, help="KDE bandwidth for the starting values")
    p.add_argument("--preset", choices=sorted(FIT_PRESETS), help="application defaults")
    _add_mcem(p)

    p = sub.add_parser("twostep", help="PCA of clr-transformed KDEs (group_id,value CSV)")
    _add_io(p)
    _add_grid(p)
    p.add_argument("--bandwidth", type=float, help="KDE bandwidth (default 2)")

    p = sub.add_parser("compositional", help="latent PCA of counts (group_id,category,count CSV)")
    _add_io(p)
    p.add_argument("--categories", help="comma-separated category order (default: first seen)")
    _add_mcem(p)

    p = sub.add_parser("simulate", help="simulation study on [0, 1]")
    _add_io(p, with_input=False)
    p.add_argument("--replicates", type=int)
    p.add_argument("--m-list", type=lambda s: [int(v) for v in s.split(",")],
                   help="comma-separated observations per group, e.g. 20,160")
    p.add_argument("--bandwidths", type=lambda s: [float(v) for v in s.split(",")],
                   help="one KDE bandwidth per m (default: design values)")
    p.add_argument("--groups", type=int, help="groups per replicate")
    p.add_argument("--cells", type=int)
    _add_mcem(p)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, preset, config file and flags, in increasing priority."""
    params = dict(DEFAULTS[args.command])
    file_vals = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
        for k, v in raw.items():
            key = k.replace("-", "_")
            key = "lam" if key == "lambda" else key
            if key not in vars(args) or key in ("command", "config", "input"):
                raise UsageError(f"unknown config key {k!r}")
            file_vals[key] = v
    flags = {k: v for k, v in vars(args).items() if v is not None}
    preset = flags.get("preset", file_vals.get("preset"))
    if preset is not None:
        if preset not in FIT_PRESETS:
            raise UsageError(f"unknown preset {preset!r}")
        params.update(FIT_PRESETS[preset])
    params.update(file_vals)
    params.update(flags)
    return params


def _mcem_config(p: dict) -> McemConfig:
    return McemConfig(epsilon=float(p["epsilon"]), lam=float(p["lam"]), mc_growth=int(p["r0"]),
                      var_explained=float(p["var_explained"]), max_iterations=int(p["max_iter"]),
                      seed=int(p["seed"]), n_jobs=int(p["jobs"]))


def _load_samples(p: dict):
    ids, values = io.read_samples_csv(p["input"], p.get("lower"), p.get("upper"))
    lower = float(p["lower"]) if p.get("lower") is not None else float(values.min())
    upper = float(p["upper"]) if p.get("upper") is not None else float(values.max())
    if not upper > lower:
        raise UsageError(f"empty domain [{lower}, {upper}]; pass --lower/--upper")
    grid = Grid(lower, upper, int(p["cells"]))
    return sample_set_from_pairs(ids, values, grid)


def _outdir(p: dict) -> Path:
    out = Path(p["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _settings(p: dict) -> dict:
    # worker count is left out so outputs do not depend on it
    skip = ("output_dir", "verbose", "config", "jobs")
    return {k: v for k, v in sorted(p.items()) if k not in skip}


def cmd_fit(p: dict) -> int:
    data = _load_samples(p)
    cfg = _mcem_config(p)
    basis = make_basis(data.grid)
    init = init_from_kde(data, KdeConfig(float(p["bandwidth"])), basis)
    res = fit(data, basis, init, cfg)
    out = _outdir(p)
    meta = {"command": "fit", "converged": res.converged, "iterations": res.iterations,
            "settings": _settings(p)}
    io.save_model(out / "model.json", res.model, meta)
    io.write_pca(out, res.pca, data.group_ids)
    dens = np.vstack([f.values for f in res.predicted_densities()])
    io.write_densities(out / "densities.csv", data.grid, data.group_ids, dens)
    io.write_trace(out / "trace.csv", res.trace)
    if not res.converged:
        print(f"warning: MCEM not converged after {res.iterations} iterations", file=sys.stderr)
        return 1
    return 0


def cmd_twostep(p: dict) -> int:
    data = _load_samples(p)
    kcfg = KdeConfig(float(p["bandwidth"]))
    pca = two_step_pca(data, kcfg)
    out = _outdir(p)
    io.write_pca(out, pca, data.group_ids)
    dens = np.vstack([kde(x, kcfg, data.grid).values for x in data.groups])
    io.write_densities(out / "densities.csv", data.grid, data.group_ids, dens)
    return 0


def cmd_compositional(p: dict) -> int:
    cats = p["categories"].split(",") if p.get("categories") else None
    data = CountData.from_records(io.read_counts_csv(p["input"], cats), cats)
    res = fit_compositional(data, _mcem_config(p))
    out = _outdir(p)
    pca = res.pca
    meta = {"command": "compositional", "categories": data.categories,
            "converged": res.converged, "iterations": res.iterations, "settings": _settings(p)}
    io.save_model(out / "model.json", res.model, meta)
    k = pca.n_components
    io.write_rows(
        out / "pca_mean.csv", ["category", "clr", "probability"],
        [(c, io.fmt(a), io.fmt(b))
         for c, a, b in zip(data.categories, pca.mean.values, mean_composition(res))],
    )
    io.write_rows(
        out / "pca_eigenfunctions.csv", ["category", *(f"phi_{j + 1}" for j in range(k))],
        [(c, *(io.fmt(v) for v in pca.eigenfunctions[:, i])) for i, c in enumerate(data.categories)],
    )
    dirs = direction_compositions(res)
    io.write_rows(
        out / "composition_directions.csv",
        ["component", "category", "direction", "mean_plus_sd", "mean_minus_sd"],
        [(j + 1, c, io.fmt(dirs["direction"][j, i]), io.fmt(dirs["plus"][j, i]),
          io.fmt(dirs["minus"][j, i]))
         for j in range(k) for i, c in enumerate(data.categories)],
    )
    # eigenvalues.csv and scores.csv share the continuous schema
    io.write_pca(out, pca, data.group_ids, grid_tables=False)
    comp = clr_discrete_inverse(res.predicted_clr())
    io.write_rows(out / "densities.csv", ["group_id", *data.categories],
                  [(g, *(io.fmt(v) for v in row)) for g, row in zip(data.group_ids, comp)])
    io.write_trace(out / "trace.csv", res.trace)
    if not res.converged:
        print(f"warning: MCEM not converged after {res.iterations} iterations", file=sys.stderr)
        return 1
    return 0


def cmd_simulate(p: dict) -> int:
    m_list = [int(m) for m in p["m_list"]]
    kw = dict(n_groups=int(p["groups"]), n_replicates=int(p["replicates"]),
              grid=Grid(0.0, 1.0, int(p["cells"])), seed=int(p["seed"]), n_jobs=int(p["jobs"]),
              mcem=replace(_mcem_config(p), n_jobs=1))
    if p.get("bandwidths") is not None:
        kw["bandwidths"] = tuple(p["bandwidths"])
    cfg = StudyConfig.for_m(m_list, **kw)

    def progress(m, rep):
        log.info("m=%d replicate %d done", m, rep)

    rows = run_study(cfg, progress)
    out = _outdir(p)
    fields = ["replicate", "m_per_group", "method", "mean_distance", "cov_distance",
              "converged", "iterations", "status"]
    io.write_rows(
        out / "study.csv", fields,
        [(d["replicate"], d["m_per_group"], d["method"], io.fmt(d["mean_distance"]),
          io.fmt(d["cov_distance"]), int(d["converged"]), d["iterations"], d["status"])
         for d in rows_as_dicts(rows)],
    )
    summary = {"settings": _settings(p), "results": summarize(rows)}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    failed = [r for r in rows if r.status.startswith("error")]
    if failed:
        print(f"warning: {len(failed)} fit(s) failed; see the status column", file=sys.stderr)
        return 1
    return 0


COMMANDS = {"fit": cmd_fit, "twostep": cmd_twostep,
            "compositional": cmd_compositional, "simulate": cmd_simulate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        params = resolve(args)
        return COMMANDS[args.command](params)
    except (NumericalError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"ldpca {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 1
    except (UsageError, ValueError, OSError) as exc:
        print(f"ldpca {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
