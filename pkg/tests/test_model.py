import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from conftest import random_psd
from ldpca.function_space import (
    Grid, GridFunction, bayes_inner_product, clr_inverse, explicit_basis, inner_product,
    integrate, make_basis,
)
from ldpca.model import (
    LatentDensityModel, PCARepresentation, bayes_pca_view, eigen_decompose,
    enforce_constraint, kernel_matrix, reconstruct_density, sorted_eigh,
)


def orthonormal_basis(grid, n, rng, sum_zero=True):
    """Random orthonormal (in L2) functions on `grid`, optionally integrating to 0."""
    a = rng.normal(size=(grid.n_cells, n))
    if sum_zero:
        a -= a.mean(axis=0)
    q, _ = np.linalg.qr(a)
    return explicit_basis(grid, (q / np.sqrt(grid.width)).T)


def two_function_basis():
    g = Grid(0.0, 1.0, 4)
    e1 = np.array([1, -1, 0, 0.0]) * np.sqrt(2)
    e2 = np.array([0, 0, 1, -1.0]) * np.sqrt(2)
    return explicit_basis(g, [e1, e2])


class TestSortedEigh:
    def test_order_and_sign(self, rng):
        s = random_psd(6, rng)
        vals, vecs = sorted_eigh(s)
        assert np.all(np.diff(vals) <= 0)
        piv = np.abs(vecs).argmax(axis=0)
        assert np.all(vecs[piv, np.arange(6)] > 0)
        assert_allclose(vecs @ np.diag(vals) @ vecs.T, s, atol=1e-12)

    def test_clips_tiny_negative(self):
        vals, _ = sorted_eigh(np.diag([1.0, -5e-11]))
        assert_array_equal(vals, [1.0, 0.0])

    def test_rejects_negative(self):
        with pytest.raises(ValueError, match="PSD"):
            sorted_eigh(np.diag([1.0, -1e-6]))


class TestLatentDensityModel:
    def test_shapes_validated(self, grid200):
        b = make_basis(grid200)
        with pytest.raises(ValueError):
            LatentDensityModel(b, np.zeros(3), np.eye(200))
        with pytest.raises(ValueError):
            LatentDensityModel(b, np.zeros(200), np.eye(3))

    def test_symmetrized(self, rng):
        g = Grid(0.0, 1.0, 5)
        s = random_psd(5, rng)
        noisy = s + 1e-12 * rng.normal(size=(5, 5))
        m = LatentDensityModel(make_basis(g), np.zeros(5), noisy)
        assert_array_equal(m.sigma, m.sigma.T)

    def test_asymmetric_rejected(self):
        g = Grid(0.0, 1.0, 2)
        with pytest.raises(ValueError, match="symmetric"):
            LatentDensityModel(make_basis(g), np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_not_psd_rejected(self):
        g = Grid(0.0, 1.0, 2)
        with pytest.raises(ValueError, match="PSD"):
            LatentDensityModel(make_basis(g), np.zeros(2), np.diag([1.0, -0.1]))

    def test_from_estimates_sum_to_zero(self, rng):
        g = Grid(0.0, 1.0, 8)
        m = LatentDensityModel.from_estimates(make_basis(g), rng.normal(size=8), random_psd(8, rng))
        assert abs(m.nu.sum()) < 1e-8
        assert_allclose(m.sigma @ np.ones(8), 0.0, atol=1e-8)
        assert abs(integrate(m.mean)) < 1e-12

    def test_enforce_constraint_identity_for_zero_sum_basis(self, rng):
        b = two_function_basis()
        nu, s = rng.normal(size=2), random_psd(2, rng)
        nu2, s2 = enforce_constraint(b, nu, s)
        assert_array_equal(nu2, nu)
        assert_allclose(s2, s, atol=1e-15)


class TestKernelMatrix:
    def test_zero(self, grid200):
        m = LatentDensityModel(make_basis(grid200), np.zeros(200), np.zeros((200, 200)))
        assert_array_equal(kernel_matrix(m), 0.0)

    def test_identity_indicator(self):
        g = Grid(0.0, 1.0, 10)
        m = LatentDensityModel(make_basis(g), np.zeros(10), np.eye(10))
        assert_allclose(kernel_matrix(m), np.eye(10) / g.width, rtol=1e-14)

    def test_operator_eigenvalues_match_sigma(self, rng):
        g = Grid(0.0, 1.0, 60)
        b = orthonormal_basis(g, 8, rng)
        s = random_psd(8, rng)
        k = kernel_matrix(LatentDensityModel(b, np.zeros(8), s))
        assert_allclose(k, k.T, atol=0)
        op_vals = np.sort(np.linalg.eigvalsh(g.width * k))[::-1][:8]
        assert_allclose(op_vals, np.sort(np.linalg.eigvalsh(s))[::-1], atol=1e-8)
        assert np.linalg.eigvalsh(g.width * k).min() > -1e-10


class TestEigenDecompose:
    def test_diagonal(self):
        b = two_function_basis()
        pca = eigen_decompose(LatentDensityModel(b, np.zeros(2), np.diag([2.0, 1.0])))
        assert_allclose(pca.eigenvalues, [2.0, 1.0])
        assert_allclose(pca.eigenfunctions[0], b.matrix[:, 0], atol=1e-14)

    def test_rotated_eigenvector(self):
        b = two_function_basis()
        v = np.array([1.0, 1.0]) / np.sqrt(2)
        s = 3.0 * np.outer(v, v) + 0.5 * np.eye(2)
        pca = eigen_decompose(LatentDensityModel(b, np.zeros(2), s))
        phi = GridFunction(b.grid, (b.matrix[:, 0] + b.matrix[:, 1]) / np.sqrt(2))
        assert inner_product(pca.component(0), phi) == pytest.approx(1.0, abs=1e-10)
        assert pca.eigenvalues[0] == pytest.approx(3.5)

    def test_eigenfunction_equation(self, rng):
        g = Grid(0.0, 2.0, 80)
        b = orthonormal_basis(g, 8, rng)
        m = LatentDensityModel(b, np.zeros(8), random_psd(8, rng))
        pca = eigen_decompose(m)
        k = kernel_matrix(m)
        for lam, phi in zip(pca.eigenvalues, pca.eigenfunctions):
            lhs = g.width * k @ phi
            assert np.max(np.abs(lhs - lam * phi)) < 1e-8

    def test_orthonormal_eigenfunctions(self, rng):
        g = Grid(0.0, 1.0, 40)
        b = orthonormal_basis(g, 6, rng)
        pca = eigen_decompose(LatentDensityModel(b, np.zeros(6), random_psd(6, rng)))
        gram = g.width * pca.eigenfunctions @ pca.eigenfunctions.T
        assert_allclose(gram, np.eye(6), atol=1e-8)

    def test_sum_to_zero_propagation(self, rng):
        g = Grid(0.0, 1.0, 30)
        m = LatentDensityModel.from_estimates(make_basis(g), rng.normal(size=30), random_psd(30, rng))
        pca = eigen_decompose(m)
        assert abs(integrate(pca.mean)) < 1e-10
        # only components with positive variance carry the constraint
        for lam, phi in zip(pca.eigenvalues, pca.eigenfunctions):
            if lam > 1e-10:
                assert abs(g.width * phi.sum()) < 1e-10

    def test_requires_orthonormal(self):
        g = Grid(0.0, 1.0, 10)
        b = explicit_basis(g, [np.ones(10), g.midpoints])
        with pytest.raises(ValueError, match="orthonormal"):
            eigen_decompose(LatentDensityModel(b, np.zeros(2), np.eye(2)))


class TestReconstruction:
    def make_pca(self, rng, n=5):
        g = Grid(0.0, 1.0, 50)
        m = LatentDensityModel.from_estimates(make_basis(g), rng.normal(size=50), random_psd(50, rng, rank=n))
        return eigen_decompose(m).truncated(n)

    def test_zero_model_uniform(self):
        g = Grid(0.0, 1.0, 20)
        pca = eigen_decompose(LatentDensityModel(make_basis(g), np.zeros(20), np.zeros((20, 20))))
        assert_allclose(reconstruct_density(pca, np.zeros(20)).values, 1.0, rtol=1e-14)
        view = bayes_pca_view(pca.truncated(2))
        # directions of a zero-variance process are arbitrary; the +-sd views are not
        for f in [view.mean, *view.plus, *view.minus]:
            assert_allclose(f.values, 1.0, rtol=1e-14)

    def test_zero_scores_give_mean(self, rng):
        pca = self.make_pca(rng)
        assert_allclose(reconstruct_density(pca, np.zeros(5)).values, clr_inverse(pca.mean).values)

    def test_plus_sd_perturbation(self, rng):
        pca = self.make_pca(rng)
        sd = np.sqrt(pca.eigenvalues[0])
        f = reconstruct_density(pca, [sd], k_components=1)
        assert_allclose(f.values, bayes_pca_view(pca).plus[0].values, rtol=1e-12)

    def test_round_trip_full_rank(self, rng):
        pca = self.make_pca(rng)
        z = rng.normal(size=5) * np.sqrt(pca.eigenvalues)
        g = pca.mean.values + z @ pca.eigenfunctions
        truth = clr_inverse(GridFunction(pca.grid, g))
        truth_clr = np.log(truth.values) - np.log(truth.values).mean()
        assert_allclose(truth_clr, g, atol=1e-10)
        scores = pca.grid.width * (truth_clr - pca.mean.values) @ pca.eigenfunctions.T
        assert_allclose(reconstruct_density(pca, scores).values, truth.values, rtol=1e-8)

    def test_bad_k(self, rng):
        pca = self.make_pca(rng)
        with pytest.raises(ValueError):
            reconstruct_density(pca, np.zeros(5), k_components=6)
        with pytest.raises(ValueError):
            reconstruct_density(pca, np.zeros(2), k_components=4)

    def test_directions_bayes_orthonormal(self, rng):
        pca = self.make_pca(rng)
        view = bayes_pca_view(pca)
        gram = np.array([[bayes_inner_product(a, b) for b in view.directions] for a in view.directions])
        assert_allclose(gram, np.eye(5), atol=1e-8)

    def test_exp_score_moment(self, rng):
        # E exp(Z) = exp(sigma^2 / 2) for Z ~ N(0, sigma^2)
        var = 0.3
        z = rng.normal(0, np.sqrt(var), 20000)
        e = np.exp(z)
        se = e.std(ddof=1) / np.sqrt(z.size)
        assert abs(e.mean() - np.exp(var / 2)) < 3 * se


class TestPCARepresentation:
    def test_variance_explained(self):
        g = Grid(0.0, 1.0, 3)
        pca = PCARepresentation(g, GridFunction(g, np.zeros(3)), np.eye(3)[:2], [3.0, 1.0],
                                np.zeros((0, 2)), total_variance=5.0)
        assert_allclose(pca.variance_explained, [0.6, 0.8])
        assert pca.n_components == 2

    def test_shape_checks(self):
        g = Grid(0.0, 1.0, 3)
        with pytest.raises(ValueError):
            PCARepresentation(g, GridFunction(g, np.zeros(3)), np.eye(3)[:2], [1.0], np.zeros((0, 1)), 1.0)
        with pytest.raises(ValueError):
            PCARepresentation(g, GridFunction(g, np.zeros(3)), np.eye(3)[:1], [1.0], np.zeros((4, 2)), 1.0)

    def test_covariance_matrix(self, rng):
        g = Grid(0.0, 1.0, 10)
        m = LatentDensityModel(make_basis(g), np.zeros(10), random_psd(10, rng))
        assert_allclose(eigen_decompose(m).covariance_matrix(), kernel_matrix(m), atol=1e-10)


class TestProperties:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 8))
    def test_corollary_correspondence(self, seed, rank):
        rng = np.random.default_rng(seed)
        g = Grid(0.0, 1.0, 40)
        b = orthonormal_basis(g, 8, rng)
        m = LatentDensityModel(b, np.zeros(8), random_psd(8, rng, rank=rank))
        pca = eigen_decompose(m)
        k = g.width * kernel_matrix(m)
        assert np.max(np.abs(k @ pca.eigenfunctions.T - pca.eigenfunctions.T * pca.eigenvalues)) < 1e-8

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-20, 20))
    def test_reconstruction_is_density(self, seed, scale):
        rng = np.random.default_rng(seed)
        g = Grid(0.0, 1.0, 30)
        m = LatentDensityModel.from_estimates(make_basis(g), rng.normal(size=30), random_psd(30, rng, 4))
        pca = eigen_decompose(m).truncated(4)
        f = reconstruct_density(pca, scale * rng.normal(size=4))
        assert abs(integrate(f) - 1) < 1e-10
