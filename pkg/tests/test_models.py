#!/usr/bin/env python3
"""
Tests for models.py
"""

import pytest
import sys
import os

import numpy as np

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from enkf_lab.estimators import effective_dims
from enkf_lab.exceptions import InvalidInputError, NotPSDError
from enkf_lab.models import (
    CovarianceSpec,
    Ensemble,
    ForwardMap,
    GaussianPrior,
    banded_matrix,
    expected_jacobian_tanh,
    linear_map,
    make_covariance,
    random_orthogonal,
    sample_ensemble,
    sample_noise,
    tanh_fixture,
)


class TestGaussianPrior:
    """Test prior validation"""

    def test_valid_prior(self):
        prior = GaussianPrior([0.0, 1.0], np.eye(2))
        assert prior.dim == 2

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            GaussianPrior([0.0], np.eye(2))

    def test_rejects_indefinite_cov(self):
        with pytest.raises(NotPSDError):
            GaussianPrior([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])


class TestEnsemble:
    """Test ensemble moments and validation"""

    def test_mean_and_anomalies(self):
        E = Ensemble([[1.0, 0.0], [3.0, 2.0]])
        np.testing.assert_allclose(E.mean, [2.0, 1.0])
        np.testing.assert_allclose(E.anomalies.sum(axis=0), [0.0, 0.0])

    def test_sqrt_cov_gives_sample_cov(self):
        rng = np.random.default_rng(0)
        E = Ensemble(rng.standard_normal((10, 3)))
        S = E.sqrt_cov()
        assert S.shape == (3, 10)
        np.testing.assert_allclose(S @ S.T, np.cov(E.members, rowvar=False), atol=1e-12)

    def test_one_member_rejected(self):
        with pytest.raises(InvalidInputError):
            Ensemble([[1.0, 2.0]])

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidInputError):
            Ensemble([[1.0], [np.inf]])


class TestForwardMaps:
    """Test linear and tanh forward maps"""

    def test_linear_map_evaluates_rows(self):
        A = np.array([[1.0, 2.0], [0.0, 1.0], [1.0, 1.0]])
        G = linear_map(A)
        U = np.array([[1.0, 1.0], [2.0, 0.0]])
        np.testing.assert_allclose(G.evaluate(U), U @ A.T)
        np.testing.assert_allclose(G.evaluate([1.0, 1.0]), [3.0, 1.0, 2.0])
        assert G.is_linear

    def test_wrong_input_dim(self):
        with pytest.raises(InvalidInputError):
            linear_map(np.eye(2)).evaluate([1.0, 2.0, 3.0])

    def test_matrix_shape_checked(self):
        with pytest.raises(InvalidInputError):
            ForwardMap(input_dim=3, output_dim=2, matrix=np.eye(2))

    def test_tanh_fixture_values(self):
        G = tanh_fixture(4, 3, coupling=0.5)
        u = np.array([0.1, -0.2, 0.3, 0.4])
        expected = np.tanh(u[:3]) + 0.5 * u[[1, 2, 3]]
        np.testing.assert_allclose(G.evaluate(u), expected)
        assert G.lipschitz == pytest.approx(1.5)

    def test_tanh_jacobian_matches_finite_differences(self):
        G = tanh_fixture(5, 5, coupling=0.1)
        u = np.linspace(-1.0, 1.0, 5)
        h = 1e-6
        fd = np.column_stack([(G.evaluate(u + h * e) - G.evaluate(u - h * e)) / (2 * h) for e in np.eye(5)])
        np.testing.assert_allclose(G.jacobian(u), fd, atol=1e-8)

    def test_tanh_requires_k_le_d(self):
        with pytest.raises(InvalidInputError):
            tanh_fixture(3, 4)

    def test_expected_jacobian_at_zero_variance_limit(self):
        prior = GaussianPrior(np.zeros(3), 1e-12 * np.eye(3))
        J = expected_jacobian_tanh(prior, 3, coupling=0.2)
        np.testing.assert_allclose(np.diag(J), np.ones(3), atol=1e-9)
        assert J[0, 1] == pytest.approx(0.2)

    def test_banded_matrix(self):
        B = banded_matrix(3, 4, bandwidth=2, value=2.0)
        expected = np.array([
            [2.0, 2.0, 0.0, 0.0],
            [0.0, 2.0, 2.0, 0.0],
            [0.0, 0.0, 2.0, 2.0],
        ])
        np.testing.assert_array_equal(B, expected)


class TestCovarianceGenerators:
    """Test structured covariance construction"""

    def test_ar1(self):
        C = make_covariance(CovarianceSpec(kind="ar1", d=3, phi=0.5, variance=2.0))
        assert C[0, 2] == pytest.approx(2.0 * 0.25)
        assert C[1, 1] == pytest.approx(2.0)

    def test_ar1_rejects_unit_phi(self):
        with pytest.raises(InvalidInputError):
            make_covariance(CovarianceSpec(kind="ar1", d=3, phi=1.0))

    @pytest.mark.parametrize("r2", [1.0, 2.5, 8.0, 50.0])
    def test_spectrum_decay_hits_target_r2(self, r2):
        C = make_covariance(CovarianceSpec(kind="spectrum-decay", d=50, r2=r2))
        assert effective_dims(C).r2 == pytest.approx(r2, rel=1e-9)

    def test_spectrum_decay_r2_out_of_range(self):
        with pytest.raises(InvalidInputError):
            make_covariance(CovarianceSpec(kind="spectrum-decay", d=5, r2=6.0))

    def test_banded(self):
        C = make_covariance(CovarianceSpec(kind="banded", d=4, values=[1.0, 0.4]))
        assert C[0, 1] == C[1, 0] == pytest.approx(0.4)
        assert C[0, 2] == 0.0

    def test_diagonal_spectrum(self):
        C = make_covariance(CovarianceSpec(kind="diagonal-spectrum", eigenvalues=[3.0, 1.0]))
        np.testing.assert_array_equal(C, np.diag([3.0, 1.0]))

    def test_unknown_kind(self):
        with pytest.raises(InvalidInputError):
            make_covariance(CovarianceSpec(kind="toeplitz", d=3))

    def test_spec_round_trip_through_dict(self):
        spec = CovarianceSpec.from_dict({"kind": "ar1", "d": 10, "phi": 0.3})
        assert spec.to_dict() == {"kind": "ar1", "d": 10, "phi": 0.3, "variance": 1.0}

    def test_unknown_spec_field(self):
        with pytest.raises(InvalidInputError):
            CovarianceSpec.from_dict({"kind": "ar1", "d": 10, "rho": 0.3})


class TestSampling:
    """Test seeded sampling"""

    def test_same_seed_same_ensemble(self):
        prior = GaussianPrior(np.zeros(3), np.eye(3))
        a = sample_ensemble(prior, 5, seed=42)
        b = sample_ensemble(prior, 5, seed=42)
        np.testing.assert_array_equal(a.members, b.members)

    def test_different_seed_different_ensemble(self):
        prior = GaussianPrior(np.zeros(3), np.eye(3))
        assert not np.array_equal(sample_ensemble(prior, 5, 1).members, sample_ensemble(prior, 5, 2).members)

    def test_singular_prior(self):
        prior = GaussianPrior(np.zeros(2), np.diag([1.0, 0.0]))
        E = sample_ensemble(prior, 20, seed=0)
        np.testing.assert_allclose(E.members[:, 1], 0.0, atol=1e-12)

    def test_n_below_two(self):
        with pytest.raises(InvalidInputError):
            sample_ensemble(GaussianPrior([0.0], [[1.0]]), 1, seed=0)

    @pytest.mark.slow
    def test_sample_moments_converge(self):
        C = make_covariance(CovarianceSpec(kind="ar1", d=4, phi=0.6))
        prior = GaussianPrior(np.arange(4.0), C)
        E = sample_ensemble(prior, 200_000, seed=7)
        np.testing.assert_allclose(E.mean, prior.mean, atol=0.02)
        np.testing.assert_allclose(np.cov(E.members, rowvar=False), C, atol=0.02)

    def test_noise_has_zero_mean_dimension(self):
        H = sample_noise(2.0 * np.eye(3), 4, seed=3)
        assert H.members.shape == (4, 3)

    def test_random_orthogonal(self):
        Q = random_orthogonal(6, np.random.default_rng(0))
        np.testing.assert_allclose(Q.T @ Q, np.eye(6), atol=1e-12)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
