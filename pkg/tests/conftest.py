import numpy as np
import pytest

from ldpca.function_space import Grid, GridFunction, clr_inverse


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def grid200():
    return Grid(0.0, 1.0, 200)


def random_smooth_clr(grid, rng, n_terms=6, scale=1.0):
    """Random smooth function: a short cosine series with decaying amplitudes."""
    x = (grid.midpoints - grid.lower) / grid.length
    k = np.arange(1, n_terms + 1)
    amp = rng.normal(0.0, scale, n_terms) / k
    phase = rng.uniform(0, 2 * np.pi, n_terms)
    return GridFunction(grid, (amp[:, None] * np.cos(np.pi * k[:, None] * x + phase[:, None])).sum(0))


def random_density(grid, rng, **kw):
    return clr_inverse(random_smooth_clr(grid, rng, **kw))


def random_psd(n, rng, rank=None):
    rank = n if rank is None else rank
    a = rng.normal(size=(n, rank))
    return a @ a.T / rank


# PASS/FAIL lines recorded by test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
