"""Simulation study: latent model versus two-step KDE PCA.

Truth is a two-component Gaussian process in clr space on ``[0, 1]``; each
replicate draws ``n_groups`` densities, samples ``m`` points from each, fits
both methods, and records their distances to the oracle estimates computed
from the true densities.
"""

from __future__ import annotations

import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .evaluation import cov_distance, mean_distance, oracle_estimates, two_step_pca
from .function_space import Density, Grid, GridFunction, clr_inverse, make_basis
from .initialization import KdeConfig, SampleSet, init_from_kde
from .mcem import McemConfig, fit
from .model import kernel_matrix

__all__ = [
    "StudyConfig",
    "TrueProcess",
    "StudyRow",
    "true_process",
    "draw_densities",
    "sample_from_density",
    "run_replicate",
    "run_study",
    "summarize",
]

log = logging.getLogger(__name__)

LATENT = "latent_density"
TWO_STEP = "two_step_kde"
VAR1 = 0.5
VAR2 = 0.2


def _default_grid() -> Grid:
    return Grid(0.0, 1.0, 200)


@dataclass(frozen=True)
class StudyConfig:
    """Settings of the simulation study; defaults follow the published design."""

    n_groups: int = 30
    m_per_group: tuple[int, ...] = (20, 40, 80, 160)
    n_replicates: int = 100
    grid: Grid = field(default_factory=_default_grid)
    bandwidths: tuple[float, ...] = (0.12, 0.09, 0.08, 0.07)
    mcem: McemConfig = field(default_factory=McemConfig)
    seed: int = 20240101
    n_jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "m_per_group", tuple(int(m) for m in self.m_per_group))
        object.__setattr__(self, "bandwidths", tuple(float(b) for b in self.bandwidths))
        if self.n_groups < 2:
            raise ValueError("n_groups must be at least 2")
        if self.n_replicates < 1:
            raise ValueError("n_replicates must be positive")
        if not self.m_per_group or min(self.m_per_group) < 1:
            raise ValueError("m_per_group entries must be positive")
        if len(self.bandwidths) != len(self.m_per_group):
            raise ValueError("need one bandwidth per entry of m_per_group")
        if min(self.bandwidths) <= 0:
            raise ValueError("bandwidths must be positive")
        if self.n_jobs < 1:
            raise ValueError("n_jobs must be >= 1")

    @classmethod
    def for_m(cls, m_list, **kwargs) -> "StudyConfig":
        """Config for a subset of ``m`` values, picking the matching default bandwidths."""
        known = dict(zip(cls.m_per_group, cls.bandwidths))
        missing = [m for m in m_list if m not in known]
        if missing and "bandwidths" not in kwargs:
            raise ValueError(f"no default bandwidth for m={missing}; pass bandwidths")
        if "bandwidths" not in kwargs:
            kwargs["bandwidths"] = tuple(known[m] for m in m_list)
        return cls(m_per_group=tuple(m_list), **kwargs)


@dataclass(frozen=True, eq=False)
class TrueProcess:
    mu: GridFunction
    g1: GridFunction
    g2: GridFunction
    var1: float = VAR1
    var2: float = VAR2


def true_process(grid: Grid | None = None) -> TrueProcess:
    """Mean and the two component functions at the cell midpoints."""
    grid = grid or _default_grid()
    x = grid.midpoints
    mu = -20.0 * (x - 0.5) ** 2 + 5.0 / 3.0
    g1 = 0.2 * np.sin(10.0 * (x - 0.5))
    g2 = 0.1 * np.cos(2.0 * np.pi * (x - 0.5))
    return TrueProcess(GridFunction(grid, mu), GridFunction(grid, g1), GridFunction(grid, g2))


def draw_densities(n: int, rng: np.random.Generator,
                   grid: Grid | None = None) -> tuple[list[Density], np.ndarray]:
    """Draw ``n`` true densities and their scores ``(z1, z2)``."""
    tp = true_process(grid)
    z = np.column_stack([
        rng.normal(0.0, np.sqrt(tp.var1), n),
        rng.normal(0.0, np.sqrt(tp.var2), n),
    ])
    dens = [clr_inverse(tp.mu + zi[0] * tp.g1 + zi[1] * tp.g2) for zi in z]
    return dens, z


def sample_from_density(f: GridFunction, m: int, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draws: pick a cell by its mass, then a uniform point inside it."""
    if m <= 0:
        raise ValueError("m must be positive")
    grid = f.grid
    cdf = np.cumsum(f.values)
    cdf /= cdf[-1]
    cell = np.searchsorted(cdf, rng.random(m), side="right")
    cell = np.minimum(cell, grid.n_cells - 1)
    x = grid.lower + (cell + rng.random(m)) * grid.width
    return np.clip(x, grid.lower, grid.upper)


@dataclass(frozen=True)
class StudyRow:
    replicate: int
    m_per_group: int
    method: str
    mean_distance: float
    cov_distance: float
    converged: bool = True
    iterations: int = 0
    status: str = "ok"


def _replicate_seeds(master: int, m: int, replicate: int) -> tuple[np.random.Generator, int]:
    ss = np.random.SeedSequence(int(master), spawn_key=(int(m), int(replicate)))
    data_ss, mcem_ss = ss.spawn(2)
    return np.random.default_rng(data_ss), int(mcem_ss.generate_state(1, np.uint64)[0])


def run_replicate(cfg: StudyConfig, m: int, bandwidth: float, replicate: int,
                  on_fit=None) -> list[StudyRow]:
    """One replicate at one ``m``: truth, samples, both fits, distances.

    ``on_fit(fit_result, two_step_pca)`` is called when both fits succeed,
    for callers that want to inspect the estimates themselves.
    """
    rng, mcem_seed = _replicate_seeds(cfg.seed, m, replicate)
    dens, _ = draw_densities(cfg.n_groups, rng, cfg.grid)
    data = SampleSet([sample_from_density(f, m, rng) for f in dens], cfg.grid)
    oracle = oracle_estimates(dens)
    kcfg = KdeConfig(bandwidth)
    rows = []
    res = pca = None
    try:
        basis = make_basis(cfg.grid)
        res = fit(data, basis, init_from_kde(data, kcfg, basis), replace(cfg.mcem, seed=mcem_seed))
        rows.append(StudyRow(
            replicate, m, LATENT,
            mean_distance(oracle.mean, res.model.mean),
            cov_distance(oracle.covariance, kernel_matrix(res.model), cfg.grid),
            res.converged, res.iterations,
            "ok" if res.converged else "not_converged",
        ))
    except Exception as exc:  # recorded in the table, study continues
        log.error("replicate %d (m=%d) latent fit failed: %s", replicate, m, exc)
        log.debug(traceback.format_exc())
        rows.append(StudyRow(replicate, m, LATENT, float("nan"), float("nan"), False, 0,
                             f"error: {type(exc).__name__}: {exc}"))
    try:
        pca = two_step_pca(data, kcfg)
        rows.append(StudyRow(
            replicate, m, TWO_STEP,
            mean_distance(oracle.mean, pca.mean),
            cov_distance(oracle.covariance, pca.covariance_matrix(), cfg.grid),
        ))
    except Exception as exc:
        log.error("replicate %d (m=%d) two-step fit failed: %s", replicate, m, exc)
        rows.append(StudyRow(replicate, m, TWO_STEP, float("nan"), float("nan"), False, 0,
                             f"error: {type(exc).__name__}: {exc}"))
    if on_fit is not None and res is not None and pca is not None:
        on_fit(res, pca)
    return rows


def _run_job(args):
    return run_replicate(*args)


def run_study(cfg: StudyConfig, progress=None) -> list[StudyRow]:
    """Run every ``(m, replicate)`` job; rows come back in ``(m, replicate)`` order."""
    jobs = [(cfg, m, bw, rep)
            for m, bw in zip(cfg.m_per_group, cfg.bandwidths)
            for rep in range(1, cfg.n_replicates + 1)]
    rows: list[StudyRow] = []
    if cfg.n_jobs == 1:
        for job in jobs:
            rows.extend(_run_job(job))
            if progress:
                progress(job[1], job[3])
    else:
        with ProcessPoolExecutor(max_workers=cfg.n_jobs) as pool:
            for job, out in zip(jobs, pool.map(_run_job, jobs)):
                rows.extend(out)
                if progress:
                    progress(job[1], job[3])
    return rows


def summarize(rows: list[StudyRow]) -> dict:
    """Mean and sd of each distance per method and ``m``, over successful rows."""
    out: dict = {}
    for method in sorted({r.method for r in rows}):
        out[method] = {}
        for m in sorted({r.m_per_group for r in rows}):
            sel = [r for r in rows if r.method == method and r.m_per_group == m]
            ok = [r for r in sel if np.isfinite(r.mean_distance)]
            entry = {"n": len(sel), "n_ok": len(ok),
                     "n_not_converged": sum(not r.converged for r in sel)}
            for key in ("mean_distance", "cov_distance"):
                vals = np.array([getattr(r, key) for r in ok])
                entry[key] = {
                    "mean": float(vals.mean()) if vals.size else None,
                    "sd": float(vals.std(ddof=1)) if vals.size > 1 else None,
                }
            out[method][str(m)] = entry
    return out


def rows_as_dicts(rows: list[StudyRow]) -> list[dict]:
    return [asdict(r) for r in rows]
