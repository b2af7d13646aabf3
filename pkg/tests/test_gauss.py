"""
Unit tests for Scripts/gauss.py: Cholesky with jitter, densities, KL, k-means.
"""

from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from scipy import stats

from Scripts.core.errors import NumericalError
from Scripts.diffmath import DTYPE, as_tensor
from Scripts.gauss import (
    DiagGaussian,
    FullGaussian,
    cholesky_jittered,
    kl_diag,
    kl_full,
    kmeans,
    kmeans_sse,
    lloyd,
    logdet_from_chol,
    mvn_logpdf,
    reparam_sample,
)


def _random_pd(n: int, seed: int) -> torch.Tensor:
    A = torch.randn(n, n, dtype=DTYPE, generator=torch.Generator().manual_seed(seed))
    return A @ A.T + 0.5 * torch.eye(n, dtype=DTYPE)


def _random_gaussian(n: int, seed: int) -> FullGaussian:
    g = torch.Generator().manual_seed(seed)
    return FullGaussian(torch.randn(n, dtype=DTYPE, generator=g), torch.linalg.cholesky(_random_pd(n, seed + 1)))


# ============================================================================
# Cholesky
# ============================================================================

class TestCholesky:
    def test_pd_matrix_needs_no_jitter(self):
        A = _random_pd(4, 0)
        L = cholesky_jittered(A)
        assert torch.allclose(L @ L.T, A, atol=1e-12)

    def test_singular_matrix_recovers_with_jitter(self):
        A = torch.ones(3, 3, dtype=DTYPE)
        L = cholesky_jittered(A, jitter=1e-6)
        assert torch.allclose(L @ L.T, A, atol=1e-3)

    def test_negative_definite_raises(self):
        with pytest.raises(NumericalError):
            cholesky_jittered(-torch.eye(3, dtype=DTYPE))

    def test_logdet(self):
        A = _random_pd(5, 3)
        assert logdet_from_chol(torch.linalg.cholesky(A)).item() == pytest.approx(
            torch.logdet(A).item(), abs=1e-10
        )


# ============================================================================
# Densities and divergences
# ============================================================================

class TestDensities:
    def test_mvn_logpdf_matches_scipy(self):
        g = _random_gaussian(4, 10)
        x = as_tensor([0.1, -0.3, 2.0, 0.0])
        expected = stats.multivariate_normal(g.mean.numpy(), g.cov.numpy()).logpdf(x.numpy())
        assert mvn_logpdf(x, g).item() == pytest.approx(expected, abs=1e-10)

    def test_mvn_dimension_mismatch(self):
        with pytest.raises(ValueError):
            mvn_logpdf(torch.zeros(3, dtype=DTYPE), _random_gaussian(4, 0))

    def test_kl_of_identical_is_zero(self):
        g = _random_gaussian(3, 2)
        assert kl_full(g, g).item() == pytest.approx(0.0, abs=1e-12)

    def test_kl_full_univariate_closed_form(self):
        q = FullGaussian(as_tensor([0.5]), as_tensor([[0.8]]))
        p = FullGaussian(as_tensor([-0.2]), as_tensor([[1.7]]))
        expected = math.log(1.7 / 0.8) + (0.8 ** 2 + 0.7 ** 2) / (2 * 1.7 ** 2) - 0.5
        assert kl_full(q, p).item() == pytest.approx(expected, abs=1e-12)

    def test_kl_full_matches_monte_carlo(self):
        q, p = _random_gaussian(5, 20), _random_gaussian(5, 30)
        x = reparam_sample(q, torch.randn(200_000, 5, dtype=DTYPE, generator=torch.Generator().manual_seed(0)))
        diff = mvn_logpdf(x, q) - mvn_logpdf(x, p)
        se = diff.std().item() / math.sqrt(diff.numel())
        assert abs(diff.mean().item() - kl_full(q, p).item()) < 4 * se

    def test_kl_full_non_negative_on_random_pairs(self):
        for seed in range(50):
            assert kl_full(_random_gaussian(3, seed), _random_gaussian(3, seed + 100)).item() >= 0.0

    def test_kl_diag_matches_full_on_diagonal_embedding(self):
        g = torch.Generator().manual_seed(4)
        m1, m2 = torch.randn(3, dtype=DTYPE, generator=g), torch.randn(3, dtype=DTYPE, generator=g)
        s1, s2 = torch.rand(3, dtype=DTYPE, generator=g) + 0.2, torch.rand(3, dtype=DTYPE, generator=g) + 0.2
        diag = kl_diag(DiagGaussian(m1, s1), DiagGaussian(m2, s2))
        full = kl_full(FullGaussian(m1, torch.diag(s1)), FullGaussian(m2, torch.diag(s2)))
        assert diag.item() == pytest.approx(full.item(), abs=1e-12)

    def test_kl_diag_shape_mismatch(self):
        with pytest.raises(ValueError):
            kl_diag(DiagGaussian.standard(torch.zeros(2, dtype=DTYPE)),
                    DiagGaussian.standard(torch.zeros(3, dtype=DTYPE)))


# ============================================================================
# Sampling
# ============================================================================

class TestReparamSample:
    def test_empirical_moments(self):
        g = _random_gaussian(3, 5)
        noise = torch.randn(100_000, 3, dtype=DTYPE, generator=torch.Generator().manual_seed(1))
        x = reparam_sample(g, noise)
        assert torch.allclose(x.mean(0), g.mean, atol=0.03)
        assert torch.allclose(torch.cov(x.T), g.cov, atol=0.1)

    def test_diag_broadcasts_leading_sample_dims(self):
        g = DiagGaussian(torch.zeros(4, 2, dtype=DTYPE), torch.ones(4, 2, dtype=DTYPE))
        assert reparam_sample(g, torch.zeros(7, 4, 2, dtype=DTYPE)).shape == (7, 4, 2)

    def test_noise_shape_mismatch(self):
        g = DiagGaussian(torch.zeros(4, 2, dtype=DTYPE), torch.ones(4, 2, dtype=DTYPE))
        with pytest.raises(ValueError):
            reparam_sample(g, torch.zeros(4, 3, dtype=DTYPE))


# ============================================================================
# k-means
# ============================================================================

class TestKmeans:
    def test_separated_clusters(self):
        rng = np.random.default_rng(0)
        pts = np.vstack([rng.normal(-5, 0.1, (20, 2)), rng.normal(5, 0.1, (20, 2))])
        centers = kmeans(pts, 2, seed=0)
        assert sorted(np.round(centers[:, 0]).tolist()) == [-5.0, 5.0]

    def test_beats_random_subset(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(100, 3))
        centers = kmeans(pts, 8, seed=0)
        baseline = pts[rng.choice(100, 8, replace=False)]
        assert kmeans_sse(pts, centers) <= kmeans_sse(pts, baseline)

    def test_seeded_result_is_reproducible(self):
        pts = np.random.default_rng(2).normal(size=(30, 2))
        assert np.array_equal(kmeans(pts, 4, seed=3), kmeans(pts, 4, seed=3))

    def test_k_equal_n_returns_the_points(self):
        pts = np.random.default_rng(3).normal(size=(6, 2))
        centers = kmeans(pts, 6, seed=0)
        assert np.allclose(np.sort(centers, axis=0), np.sort(pts, axis=0))

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            kmeans(np.zeros((3, 2)), 4)

    def test_empty_cluster_reseeded_to_farthest_point(self):
        pts = np.vstack([np.random.default_rng(4).normal(scale=0.1, size=(10, 2)), [[10.0, 0.0]]])
        # Two identical starting centres: the second one gets no points.
        centers = lloyd(pts, np.zeros((2, 2)), iters=1)
        assert np.array_equal(centers[1], [10.0, 0.0])
        assert np.allclose(centers[0], pts.mean(axis=0))

    @pytest.mark.parametrize("seed", range(4))
    def test_duplicate_points_do_not_leave_a_centre_behind(self, seed):
        pts = np.vstack([np.zeros((10, 2)), [[10.0, 0.0]]])
        centers = kmeans(pts, 2, seed=seed)
        assert sorted(centers[:, 0].tolist()) == [0.0, 10.0]
