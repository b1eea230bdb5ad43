#!/usr/bin/env python3
"""
Tests for updates.py
"""

import pytest
import sys
import os

import numpy as np

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from enkf_lab.estimators import LocalizationConfig, localized_cov, sample_cov, sample_cross_cov
from enkf_lab.exceptions import InvalidInputError
from enkf_lab.models import Ensemble, random_orthogonal, sample_ensemble, sample_noise
from enkf_lab.operators import LinearProblem, cov_update, kalman_gain, mean_update, random_linear_problem
from enkf_lab.updates import (
    eakf_adjustment_matrix,
    eakf_update,
    etkf_update,
    localized_po_update,
    localized_sr_update,
    offset,
    po_update,
    sr_backout,
    sr_moments,
)

A_HALF = 0.7071067811865476


def random_instance(seed, d=6, k=4, N=12):
    rng = np.random.default_rng(seed)
    prior, problem = random_linear_problem(d, k, rng)
    E = sample_ensemble(prior, N, seed + 1000)
    return E, problem


class TestScalarSquareRoot:
    """Two members with sample mean 0 and variance 1; A = 1, Gamma = 1, y = 1"""

    def setup_method(self):
        self.E = Ensemble([[-A_HALF], [A_HALF]])
        self.problem = LinearProblem([[1.0]], [[1.0]], [1.0])

    def test_etkf_moments(self):
        result = etkf_update(self.E, self.problem)
        assert result.mu_hat[0] == pytest.approx(0.5)
        assert result.sigma_hat[0, 0] == pytest.approx(0.5)

    def test_etkf_members(self):
        members = etkf_update(self.E, self.problem, symmetric=True).ensemble.members[:, 0]
        np.testing.assert_allclose(np.sort(members), [0.0, 1.0], atol=1e-12)

    def test_eakf_matches_etkf(self):
        a = etkf_update(self.E, self.problem, symmetric=True)
        b = eakf_update(self.E, self.problem)
        np.testing.assert_allclose(a.sigma_hat, b.sigma_hat)
        np.testing.assert_allclose(a.ensemble.members, b.ensemble.members, atol=1e-12)


class TestSquareRootConsistency:
    """Square-root updates reproduce the Kalman operators applied to the sample moments"""

    @pytest.mark.parametrize("seed", range(5))
    def test_etkf_moments(self, seed):
        E, problem = random_instance(seed)
        C_hat = sample_cov(E)
        result = etkf_update(E, problem)
        np.testing.assert_allclose(result.mu_hat, mean_update(E.mean, C_hat, problem), atol=1e-10)
        np.testing.assert_allclose(result.sigma_hat, cov_update(C_hat, problem.A, problem.gamma), atol=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_eakf_moments(self, seed):
        E, problem = random_instance(seed, d=8, k=3, N=5)
        result = eakf_update(E, problem)
        np.testing.assert_allclose(result.sigma_hat, cov_update(sample_cov(E), problem.A, problem.gamma), atol=1e-10)

    def test_members_reproduce_moments(self):
        E, problem = random_instance(7)
        result = etkf_update(E, problem, symmetric=True)
        np.testing.assert_allclose(result.ensemble.mean, result.mu_hat, atol=1e-10)
        np.testing.assert_allclose(sample_cov(result.ensemble), result.sigma_hat, atol=1e-10)
        assert result.diagnostics["mean_drift"] < 1e-10

    def test_any_orthogonal_u_gives_same_covariance(self):
        E, problem = random_instance(8, N=10)
        U = random_orthogonal(10, np.random.default_rng(0))
        a = etkf_update(E, problem)
        b = etkf_update(E, problem, U=U)
        np.testing.assert_allclose(a.sigma_hat, b.sigma_hat, atol=1e-10)

    def test_default_u_is_identity(self):
        E, problem = random_instance(9, d=4, k=2, N=6)
        default = etkf_update(E, problem)
        literal = etkf_update(E, problem, U=np.eye(6))
        np.testing.assert_array_equal(default.ensemble.members, literal.ensemble.members)
        np.testing.assert_allclose(default.sigma_hat, cov_update(sample_cov(E), problem.A, problem.gamma), atol=1e-10)

    def test_symmetric_transform_same_covariance(self):
        """The symmetric factor differs from the literal one but squares to the same matrix"""
        E, problem = random_instance(14, d=4, k=2, N=6)
        literal = etkf_update(E, problem)
        sym = etkf_update(E, problem, symmetric=True)
        np.testing.assert_allclose(sym.sigma_hat, literal.sigma_hat, atol=1e-10)
        assert sym.diagnostics["mean_drift"] < 1e-10

    def test_u_and_symmetric_exclusive(self):
        E, problem = random_instance(15, N=4)
        with pytest.raises(InvalidInputError):
            etkf_update(E, problem, U=np.eye(4), symmetric=True)

    def test_no_information_leaves_covariance(self):
        """A = 0: sigma_hat is C_hat and the symmetric back-out returns the prior members"""
        E, _ = random_instance(16, d=4, k=2, N=6)
        problem = LinearProblem(np.zeros((2, 4)), np.eye(2), [1.0, -1.0])
        C_hat = sample_cov(E)
        literal = etkf_update(E, problem)
        np.testing.assert_allclose(literal.sigma_hat, C_hat, atol=1e-12)
        np.testing.assert_allclose(sample_cov(literal.ensemble), C_hat, atol=1e-8)
        sym = etkf_update(E, problem, symmetric=True)
        np.testing.assert_allclose(sym.mu_hat, E.mean, atol=1e-12)
        np.testing.assert_allclose(sym.ensemble.members, E.members, atol=1e-12)

    def test_non_orthogonal_u_rejected(self):
        E, problem = random_instance(10, N=4)
        with pytest.raises(InvalidInputError):
            etkf_update(E, problem, U=2.0 * np.eye(4))

    def test_u_shape_checked(self):
        E, problem = random_instance(11, N=4)
        with pytest.raises(InvalidInputError):
            etkf_update(E, problem, U=np.eye(3))

    def test_adjustment_matrix_maps_prior_factor(self):
        E, problem = random_instance(12, d=5, k=2, N=8)
        B = eakf_adjustment_matrix(E, problem)
        assert B.shape == (5, 5)
        expected = eakf_update(E, problem).sigma_hat
        X = E.sqrt_cov()
        np.testing.assert_allclose(B @ X @ X.T @ B.T, expected, atol=1e-10)

    def test_sr_moments_matches_etkf(self):
        E, problem = random_instance(13)
        mu, sigma = sr_moments(E, problem)
        result = etkf_update(E, problem)
        np.testing.assert_allclose(mu, result.mu_hat, atol=1e-10)
        np.testing.assert_allclose(sigma, result.sigma_hat, atol=1e-10)

    def test_dimension_mismatch(self):
        E = Ensemble(np.zeros((3, 2)) + np.arange(3)[:, None])
        problem = LinearProblem(np.eye(3), np.eye(3), np.zeros(3))
        with pytest.raises(InvalidInputError):
            etkf_update(E, problem)


class TestBackout:
    """Test member reconstruction from a square-root factor"""

    def test_sr_backout(self):
        S = np.array([[1.0, -1.0]])
        E = sr_backout(S, [2.0])
        np.testing.assert_allclose(E.members[:, 0], [3.0, 1.0])

    def test_sr_backout_shape_checked(self):
        with pytest.raises(InvalidInputError):
            sr_backout(np.ones((2, 3)), [0.0])


class TestPerturbedObservations:
    """Test the PO update and its offset term"""

    @pytest.mark.parametrize("seed", range(5))
    def test_covariance_identity(self, seed):
        E, problem = random_instance(seed)
        H = sample_noise(problem.gamma, E.size, seed + 50).members
        result = po_update(E, problem, perturbations=H)
        noise = Ensemble(H)
        C_hat = sample_cov(E)
        expected = cov_update(C_hat, problem.A, problem.gamma) + offset(
            C_hat, sample_cov(noise), sample_cross_cov(E, noise), problem)
        np.testing.assert_allclose(result.sigma_hat, expected, atol=1e-10)

    def test_scalar_zero_perturbations(self):
        """Members {0, 2} with C_hat = 2, A = 1, Gamma = 2, y = 1 give gain 1/2"""
        E = Ensemble([[0.0], [2.0]])
        problem = LinearProblem([[1.0]], [[2.0]], [1.0])
        result = po_update(E, problem, perturbations=np.zeros((2, 1)))
        np.testing.assert_allclose(result.ensemble.members[:, 0], [0.5, 1.5], atol=1e-12)

    def test_mean_identity(self):
        E, problem = random_instance(20)
        H = sample_noise(problem.gamma, E.size, 1).members
        result = po_update(E, problem, perturbations=H)
        K = kalman_gain(sample_cov(E), problem.A, problem.gamma)
        expected = mean_update(E.mean, sample_cov(E), problem) - K @ H.mean(axis=0)
        np.testing.assert_allclose(result.mu_hat, expected, atol=1e-10)

    def test_seed_reproducible(self):
        E, problem = random_instance(21)
        a = po_update(E, problem, seed=5)
        b = po_update(E, problem, seed=5)
        np.testing.assert_array_equal(a.ensemble.members, b.ensemble.members)

    def test_offset_vanishes_for_ideal_noise(self):
        E, problem = random_instance(22)
        d, k = problem.state_dim, problem.obs_dim
        O = offset(sample_cov(E), problem.gamma, np.zeros((d, k)), problem)
        np.testing.assert_allclose(O, 0.0, atol=1e-14)

    def test_offset_rejects_transposed_cross_cov(self):
        """C^{u eta} is d x k; a k x d matrix with the same size is not reshaped"""
        E, problem = random_instance(26, d=6, k=4)
        with pytest.raises(InvalidInputError) as exc:
            offset(sample_cov(E), problem.gamma, np.zeros((4, 6)), problem)
        assert "(6, 4)" in str(exc.value) and "(4, 6)" in str(exc.value)

    def test_offset_norm_diagnostic(self):
        E, problem = random_instance(23)
        result = po_update(E, problem, seed=0)
        assert result.diagnostics["offset_norm"] >= 0.0

    def test_needs_seed_or_perturbations(self):
        E, problem = random_instance(24)
        with pytest.raises(InvalidInputError):
            po_update(E, problem)

    def test_perturbation_shape_checked(self):
        E, problem = random_instance(25)
        with pytest.raises(InvalidInputError):
            po_update(E, problem, perturbations=np.zeros((E.size + 1, problem.obs_dim)))


class TestLocalizedUpdates:
    """Test the localized PO and square-root updates"""

    def test_loc_sr_moments(self):
        E, problem = random_instance(30, d=10, k=4, N=6)
        loc = LocalizationConfig(radius=0.2)
        result = localized_sr_update(E, problem, loc)
        C_rho = localized_cov(sample_cov(E), 0.2)
        np.testing.assert_allclose(result.mu_hat, mean_update(E.mean, C_rho, problem), atol=1e-10)
        np.testing.assert_allclose(result.sigma_hat, cov_update(C_rho, problem.A, problem.gamma), atol=1e-10)
        assert result.diagnostics["radius_used"] == 0.2

    def test_loc_sr_members_keep_mean(self):
        E, problem = random_instance(31, d=10, k=4, N=6)
        result = localized_sr_update(E, problem, LocalizationConfig(radius=0.2))
        np.testing.assert_allclose(result.ensemble.mean, result.mu_hat, atol=1e-10)

    def test_zero_radius_reduces_to_square_root(self):
        E, problem = random_instance(32, d=5, k=3, N=20)
        loc = localized_sr_update(E, problem, LocalizationConfig(radius=0.0))
        plain = etkf_update(E, problem)
        np.testing.assert_allclose(loc.sigma_hat, plain.sigma_hat, atol=1e-9)
        np.testing.assert_allclose(sample_cov(loc.ensemble), plain.sigma_hat, atol=1e-8)

    def test_loc_po_zero_radius_reduces_to_po(self):
        E, problem = random_instance(33, d=5, k=3, N=20)
        H = sample_noise(problem.gamma, E.size, 9).members
        loc = localized_po_update(E, problem, LocalizationConfig(radius=0.0), perturbations=H)
        plain = po_update(E, problem, perturbations=H)
        np.testing.assert_allclose(loc.ensemble.members, plain.ensemble.members, atol=1e-9)
        assert loc.method == "loc-po"

    def test_radius_above_every_entry_drops_the_update(self):
        """rho > max|C_hat_ij| zeroes C_rho, so the gain vanishes"""
        E, problem = random_instance(36, d=5, k=3, N=8)
        rho = 2.0 * np.max(np.abs(sample_cov(E)))
        po = localized_po_update(E, problem, LocalizationConfig(radius=rho), seed=4)
        np.testing.assert_allclose(po.ensemble.members, E.members, atol=1e-12)
        sr = localized_sr_update(E, problem, LocalizationConfig(radius=rho))
        np.testing.assert_allclose(sr.sigma_hat, 0.0, atol=1e-12)
        np.testing.assert_allclose(sr.mu_hat, E.mean, atol=1e-12)

    def test_derived_radius_reported(self):
        E, problem = random_instance(34)
        result = localized_po_update(E, problem, LocalizationConfig(t=1.0, c=1.0), seed=3)
        assert result.diagnostics["radius_used"] > 0.0

    def test_to_dict(self):
        E, problem = random_instance(35, d=3, k=2, N=4)
        out = etkf_update(E, problem).to_dict()
        assert out["method"] == "etkf"
        assert out["sigma_hat"]["shape"] == [3, 3]
        assert out["diagnostics"]["gain"]["shape"] == [3, 2]
        assert len(out["mu_hat"]) == 3


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
