import numpy as np
import pytest

from compositional_inference.exceptions import NonFinite, NotSPD
from compositional_inference.models import GaussianBelief
from compositional_inference.numerics import (
    as_matrix,
    cholesky,
    is_symmetric,
    make_rng,
    matrix_exp_neg,
    mvn_sample,
    sym_eig,
    symmetrize,
)


class TestMatrices:
    """Test matrix coercion and symmetry helpers."""

    def test_scalar_becomes_one_by_one(self):
        """Test that a scalar is promoted to a 1x1 matrix."""
        assert as_matrix(3.0).shape == (1, 1)

    def test_non_finite_rejected(self):
        """Test that NaN entries raise NonFinite."""
        with pytest.raises(NonFinite):
            as_matrix([[1.0, np.nan], [0.0, 1.0]])

    def test_symmetrize(self):
        """Test that symmetrize averages with the transpose."""
        a = np.array([[1.0, 2.0], [0.0, 1.0]])
        np.testing.assert_array_equal(symmetrize(a), [[1.0, 1.0], [1.0, 1.0]])
        assert is_symmetric(symmetrize(a))
        assert not is_symmetric(a)


class TestCholesky:
    """Test the Cholesky wrapper and its jitter repair."""

    def test_factor_reproduces_matrix(self):
        """Test L Lᵀ equals the input."""
        a = np.array([[4.0, 2.0], [2.0, 3.0]])
        factor = cholesky(a)
        np.testing.assert_allclose(factor @ factor.T, a, atol=1e-14)
        assert factor[0, 1] == 0.0

    def test_semidefinite_repaired(self):
        """Test that a singular PSD matrix is accepted after jitter."""
        a = np.array([[1.0, 1.0], [1.0, 1.0]])
        factor = cholesky(a)
        np.testing.assert_allclose(factor @ factor.T, a, atol=1e-6)

    def test_indefinite_raises(self):
        """Test that an indefinite matrix raises NotSPD."""
        with pytest.raises(NotSPD):
            cholesky([[1.0, 0.0], [0.0, -1.0]])

    def test_not_spd_is_value_error(self):
        """Test that domain errors are ValueErrors."""
        with pytest.raises(ValueError):
            cholesky([[-1.0]])


class TestEigen:
    """Test the symmetric eigensolver and the heat kernel."""

    def test_eigen_ascending(self):
        """Test eigenvalues come back ascending with orthonormal vectors."""
        values, vectors = sym_eig([[2.0, 1.0], [1.0, 2.0]])
        np.testing.assert_allclose(values, [1.0, 3.0])
        np.testing.assert_allclose(vectors.T @ vectors, np.eye(2), atol=1e-12)

    def test_matrix_exp_zero_beta(self):
        """Test exp(0·L) is the identity."""
        lap = np.array([[1.0, -1.0], [-1.0, 1.0]])
        np.testing.assert_allclose(matrix_exp_neg(lap, 0.0), np.eye(2), atol=1e-14)

    def test_matrix_exp_two_nodes(self):
        """Test the closed form for a two-node path graph."""
        lap = np.array([[1.0, -1.0], [-1.0, 1.0]])
        beta = 0.7
        decay = np.exp(-2.0 * beta)
        expected = 0.5 * np.array([[1 + decay, 1 - decay], [1 - decay, 1 + decay]])
        np.testing.assert_allclose(matrix_exp_neg(lap, beta), expected, atol=1e-14)

    def test_negative_beta_rejected(self):
        """Test that a negative diffusion scale is rejected."""
        with pytest.raises(ValueError):
            matrix_exp_neg(np.zeros((2, 2)), -1.0)


class TestRandom:
    """Test reproducible random streams."""

    def test_same_seed_same_stream(self):
        """Test two generators with one seed agree."""
        np.testing.assert_array_equal(make_rng(7).normal(size=5), make_rng(7).normal(size=5))

    def test_mvn_zero_covariance_returns_mean(self):
        """Test that a zero covariance yields the mean exactly."""
        belief = GaussianBelief(np.array([1.0, 2.0]), np.zeros((2, 2)))
        np.testing.assert_array_equal(mvn_sample(belief, make_rng()), [1.0, 2.0])

    def test_mvn_sample_moments(self):
        """Test empirical moments of many draws."""
        belief = GaussianBelief(np.array([1.0, -1.0]), np.array([[2.0, 0.5], [0.5, 1.0]]))
        rng = make_rng(3)
        draws = np.array([mvn_sample(belief, rng) for _ in range(20000)])
        np.testing.assert_allclose(draws.mean(axis=0), belief.mean, atol=0.05)
        np.testing.assert_allclose(np.cov(draws.T), belief.cov, atol=0.08)
