"""
Oracle
Brute-force references that the main code paths are checked against. These
use plain formulas with explicit inverses and full expansions, and share no
solve path with the operators module.
"""

import numpy as np

from enkf_lab.eki import PopulationMoments, population_moments_mc
from enkf_lab.estimators import sample_cov, sample_cross_cov
from enkf_lab.exceptions import InvalidInputError
from enkf_lab.matrix_kit import as_matrix, as_vector, check_shape, symmetrize
from enkf_lab.models import Ensemble, ForwardMap, GaussianPrior
from enkf_lab.operators import LinearProblem


def exact_posterior(m, C, problem: LinearProblem):
    """
    Gaussian posterior of the linear problem:

        mu    = m + C A^T (A C A^T + Gamma)^{-1} (y - A m)
        Sigma = C - C A^T (A C A^T + Gamma)^{-1} A C
    """
    m = as_vector(m, "m")
    C = as_matrix(C, "C")
    A, gamma, y = problem.A, problem.gamma, problem.y
    if m.size != problem.state_dim or C.shape != (m.size, m.size):
        raise InvalidInputError(f"Prior of dimension {m.size} with covariance {C.shape} does not match A {A.shape}")
    S_inv = np.linalg.inv(A @ C @ A.T + gamma)
    CAt = C @ A.T
    mu = m + CAt @ S_inv @ (y - A @ m)
    Sigma = C - CAt @ S_inv @ CAt.T
    return mu, symmetrize(Sigma)


def po_covariance_expansion(E: Ensemble, perturbations, problem: LinearProblem) -> np.ndarray:
    """
    Sample covariance of PO-updated members written out term by term:

        (I - K A) C (I - K A)^T + K Gamma_hat K^T
        - (I - K A) C^{u eta} K^T - K (C^{u eta})^T (I - K A)^T

    with C the sample covariance, K = K(C) from an explicit inverse and
    Gamma_hat, C^{u eta} the sample moments of the perturbations.
    """
    H = check_shape(perturbations, (E.size, problem.obs_dim), "perturbations")
    noise = Ensemble(H)
    C = sample_cov(E)
    A, gamma = problem.A, problem.gamma
    K = C @ A.T @ np.linalg.inv(A @ C @ A.T + gamma)
    I_KA = np.eye(problem.state_dim) - K @ A
    gamma_hat = sample_cov(noise)
    C_ue = sample_cross_cov(E, noise)
    out = (
        I_KA @ C @ I_KA.T
        + K @ gamma_hat @ K.T
        - I_KA @ C_ue @ K.T
        - K @ C_ue.T @ I_KA.T
    )
    return symmetrize(out)


def mean_field_reference(prior: GaussianPrior, forward: ForwardMap, N_ref: int, seed) -> PopulationMoments:
    """Single entry point for the Monte Carlo mean-field moments"""
    return population_moments_mc(prior, forward, N_ref, seed)
