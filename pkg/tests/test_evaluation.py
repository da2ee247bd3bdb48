import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from conftest import random_density, random_smooth_clr
from ldpca.function_space import (
    ClrFunction, Grid, GridFunction, GridMismatchError, clr, clr_inverse, inner_product, make_basis,
)
from ldpca.initialization import KdeConfig, SampleSet, init_from_kde, kde
from ldpca.model import LatentDensityModel, eigen_decompose
from ldpca.evaluation import (
    cov_distance, mean_distance, oracle_estimates, pointwise_moments, two_step_pca,
)
from ldpca.simulation import draw_densities, sample_from_density


def small_sample_set(rng, n=12, m=30, grid=None):
    grid = grid or Grid(0.0, 1.0, 60)
    dens, _ = draw_densities(n, rng, grid)
    return SampleSet([sample_from_density(f, m, rng) for f in dens], grid), dens


class TestTwoStep:
    def test_identical_groups(self, grid200):
        x = [0.1, 0.5, 0.52, 0.8]
        pca = two_step_pca(SampleSet([x] * 4, grid200), KdeConfig(0.1))
        assert pca.n_components == 0
        assert pca.scores.shape == (4, 0)
        assert pca.total_variance == 0.0

    def test_single_group_rejected(self, grid200):
        with pytest.raises(ValueError):
            two_step_pca(SampleSet([[0.5]], grid200), KdeConfig(0.1))

    def test_scores_are_projections(self, rng):
        data, _ = small_sample_set(rng)
        cfg = KdeConfig(0.1)
        pca = two_step_pca(data, cfg)
        for i, x in enumerate(data.groups):
            centered = GridFunction(data.grid, clr(kde(x, cfg, data.grid)).values - pca.mean.values)
            for k in range(pca.n_components):
                assert abs(pca.scores[i, k] - inner_product(centered, pca.component(k))) < 1e-10

    def test_mean_is_average_clr(self, rng):
        data, _ = small_sample_set(rng)
        cfg = KdeConfig(0.1)
        pca = two_step_pca(data, cfg)
        g = np.mean([clr(kde(x, cfg, data.grid)).values for x in data.groups], axis=0)
        assert_allclose(pca.mean.values, g, atol=1e-13)
        assert isinstance(pca.mean, ClrFunction)

    def test_matches_coefficient_model(self, rng):
        data, _ = small_sample_set(rng)
        cfg = KdeConfig(0.1)
        pca = two_step_pca(data, cfg)
        basis = make_basis(data.grid)
        nu, sigma = init_from_kde(data, cfg, basis)
        ref = eigen_decompose(LatentDensityModel(basis, nu, sigma)).truncated(pca.n_components)
        assert_allclose(pca.eigenvalues, ref.eigenvalues, rtol=0, atol=1e-8)
        assert_allclose(pca.mean.values, ref.mean.values, atol=1e-8)
        # eigenfunctions agree up to sign where eigenvalues are separated
        for k in range(min(5, pca.n_components)):
            c = inner_product(pca.component(k), ref.component(k))
            assert abs(abs(c) - 1) < 1e-8
        assert_allclose(pca.total_variance, np.trace(sigma), rtol=1e-10)

    def test_approaches_oracle(self):
        rng = np.random.default_rng(8)
        grid = Grid(0.0, 1.0, 100)
        dens, _ = draw_densities(10, rng, grid)
        oracle = oracle_estimates(dens)
        dists = []
        for m in (50, 5000):
            data = SampleSet([sample_from_density(f, m, rng) for f in dens], grid)
            pca = two_step_pca(data, KdeConfig(0.15 * m ** -0.2))
            dists.append(mean_distance(pca.mean, oracle.mean))
        assert dists[1] < dists[0]
        assert dists[1] < 0.1


class TestOracle:
    def test_identical(self, grid200, rng):
        f = random_density(grid200, rng)
        est = oracle_estimates([f, f, f])
        assert_allclose(est.covariance, 0.0, atol=1e-24)
        assert_allclose(est.mean.values, clr(f).values, atol=1e-14)

    def test_plus_minus(self, rng):
        g = Grid(0.0, 1.0, 50)
        h = random_smooth_clr(g, rng)
        h = GridFunction(g, h.values - h.values.mean())
        est = oracle_estimates([clr_inverse(h), clr_inverse(-h)])
        assert_allclose(est.mean.values, 0.0, atol=1e-13)
        assert_allclose(est.covariance, np.outer(h.values, h.values), atol=1e-12)

    def test_brute_force(self, rng):
        g = Grid(0.0, 1.0, 25)
        dens = [random_density(g, rng) for _ in range(7)]
        est = oracle_estimates(dens)
        c = [clr(f).values for f in dens]
        mu = sum(c) / 7
        cov = np.zeros((25, 25))
        for x in range(25):
            for y in range(25):
                cov[x, y] = sum((ci[x] - mu[x]) * (ci[y] - mu[y]) for ci in c) / 7
        assert_allclose(est.mean.values, mu, atol=1e-12)
        assert_allclose(est.covariance, cov, atol=1e-12)
        assert_allclose(est.covariance, est.covariance.T, atol=0)
        assert np.linalg.eigvalsh(est.covariance).min() > -1e-10

    def test_needs_two(self, grid200, rng):
        with pytest.raises(ValueError):
            oracle_estimates([random_density(grid200, rng)])

    def test_grid_mismatch(self, rng):
        with pytest.raises(GridMismatchError):
            oracle_estimates([random_density(Grid(0, 1, 10), rng), random_density(Grid(0, 1, 11), rng)])


class TestPointwiseMoments:
    def test_divisor_n(self):
        mean, cov = pointwise_moments(np.array([[1.0, 0.0], [-1.0, 2.0]]))
        assert_allclose(mean, [0, 1])
        assert_allclose(cov, [[1, -1], [-1, 1]])


class TestDistances:
    def test_identity(self, rng):
        g = Grid(0.0, 1.0, 30)
        a = random_smooth_clr(g, rng)
        assert mean_distance(a, a) == 0.0
        m = rng.normal(size=(30, 30))
        assert cov_distance(m, m, g) == 0.0

    def test_constant_offset(self, rng):
        g = Grid(-2.0, 3.0, 40)
        a = random_smooth_clr(g, rng)
        b = GridFunction(g, a.values - 0.7)
        assert mean_distance(a, b) == pytest.approx(0.7 * np.sqrt(5.0), rel=1e-13)
        m = rng.normal(size=(40, 40))
        assert cov_distance(m, m + 0.7, g) == pytest.approx(0.7 * 5.0, rel=1e-13)

    def test_refinement(self, rng):
        g = Grid(0.0, 2.0, 20)
        fine = Grid(0.0, 2.0, 20 * 16)
        a, b = rng.normal(size=20), rng.normal(size=20)
        coarse_d = mean_distance(GridFunction(g, a), GridFunction(g, b))
        fine_d = mean_distance(GridFunction(fine, np.repeat(a, 16)), GridFunction(fine, np.repeat(b, 16)))
        assert abs(coarse_d - fine_d) / fine_d < 1e-6
        A, B = rng.normal(size=(20, 20)), rng.normal(size=(20, 20))
        up = lambda m: np.repeat(np.repeat(m, 16, axis=0), 16, axis=1)
        assert abs(cov_distance(A, B, g) - cov_distance(up(A), up(B), fine)) / cov_distance(A, B, g) < 1e-6

    def test_mismatch(self, rng):
        with pytest.raises(GridMismatchError):
            mean_distance(GridFunction(Grid(0, 1, 3), np.zeros(3)), GridFunction(Grid(0, 1, 4), np.zeros(4)))
        with pytest.raises(GridMismatchError):
            cov_distance(np.zeros((3, 3)), np.zeros((3, 3)), Grid(0, 1, 4))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_metric_axioms(self, seed):
        rng = np.random.default_rng(seed)
        g = Grid(0.0, 1.0, 15)
        f = [GridFunction(g, rng.normal(size=15)) for _ in range(3)]
        d = mean_distance
        assert d(f[0], f[1]) == pytest.approx(d(f[1], f[0]), rel=1e-14)
        assert d(f[0], f[2]) <= d(f[0], f[1]) + d(f[1], f[2]) + 1e-12
        m = [rng.normal(size=(15, 15)) for _ in range(3)]
        assert cov_distance(m[0], m[1], g) == pytest.approx(cov_distance(m[1], m[0], g), rel=1e-14)
        assert cov_distance(m[0], m[2], g) <= cov_distance(m[0], m[1], g) + cov_distance(m[1], m[2], g) + 1e-12
        assert cov_distance(m[0], m[1], g) > 0
