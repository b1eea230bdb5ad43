"""
Updates
One-step ensemble updates for the linear-Gaussian problem: perturbed
observations (PO) with its offset term, square-root updates (ETKF and EAKF)
with member back-out, and the localized variants of both.

Square-root factors are stored d x N, following Ensemble.sqrt_cov(). ETKF uses
the literal X E (I + Lambda)^{-1/2} U form with U = I by default. The symmetric
transform X (I + F^T F)^{-1/2} is computed from a thin SVD of F = L^{-1} A X
(Gamma = L L^T), so the N x N matrix is never decomposed; EAKF, the localized
square-root update and etkf_update(..., symmetric=True) use it.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np
from scipy import linalg

from enkf_lab.estimators import LocalizationConfig, localized_cov, sample_cov, sample_cross_cov
from enkf_lab.exceptions import InvalidInputError, NumericError
from enkf_lab.matrix_kit import (
    as_matrix,
    as_vector,
    check_shape,
    cholesky_pd,
    inv_sqrt_spd,
    operator_norm,
    pseudo_inverse,
    sqrt_factor,
    sym_eig,
    symmetrize,
)
from enkf_lab.models import Ensemble, sample_noise
from enkf_lab.operators import LinearProblem, cov_update, kalman_gain, mean_update

logger = logging.getLogger(__name__)

ORTHOGONALITY_TOL = 1e-8


@dataclass(eq=False)
class UpdateResult:
    """Updated ensemble with the moment estimates (mu_hat, sigma_hat) and diagnostics"""
    ensemble: Ensemble
    mu_hat: np.ndarray
    sigma_hat: np.ndarray
    method: str
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        """JSON-ready view: dense matrices as row-major nested lists"""
        diagnostics = {}
        for key, value in self.diagnostics.items():
            if isinstance(value, np.ndarray):
                diagnostics[key] = {"shape": list(value.shape), "data": value.tolist()}
            else:
                diagnostics[key] = value
        return {
            "method": self.method,
            "mu_hat": self.mu_hat.tolist(),
            "sigma_hat": {"shape": list(self.sigma_hat.shape), "data": self.sigma_hat.tolist()},
            "diagnostics": diagnostics,
        }


def _check_ensemble(E: Ensemble, problem: LinearProblem):
    if E.dim != problem.state_dim:
        raise InvalidInputError(f"Ensemble dimension {E.dim} != state dimension {problem.state_dim}")


def _perturbations(problem: LinearProblem, N: int, seed, perturbations) -> np.ndarray:
    """Caller-supplied (N, k) perturbations, or fresh N(0, Gamma) draws from seed"""
    if perturbations is None:
        if seed is None:
            raise InvalidInputError("A seed is required when perturbations are not supplied")
        return sample_noise(problem.gamma, N, seed).members
    return check_shape(perturbations, (N, problem.obs_dim), "Perturbations")


def offset(C_hat, gamma_hat, C_u_eta_hat, problem: LinearProblem) -> np.ndarray:
    """
    O = K (Gamma_hat - Gamma) K^T - (I - K A) C^{u eta} K^T - K (C^{u eta})^T (I - K A)^T

    with K = K(C_hat). It is the exact gap between the PO sample covariance and C(C_hat).
    """
    d, k = problem.state_dim, problem.obs_dim
    C_hat = as_matrix(C_hat, "C_hat")
    gamma_hat = check_shape(gamma_hat, (k, k), "Gamma_hat")
    C_ue = check_shape(C_u_eta_hat, (d, k), "C_u_eta_hat")
    K = kalman_gain(C_hat, problem.A, problem.gamma)
    I_KA = np.eye(d) - K @ problem.A
    out = K @ (gamma_hat - problem.gamma) @ K.T - I_KA @ C_ue @ K.T - K @ C_ue.T @ I_KA.T
    return symmetrize(out)


def _po_step(E: Ensemble, C_used: np.ndarray, problem: LinearProblem, H: np.ndarray, method: str) -> UpdateResult:
    K = kalman_gain(C_used, problem.A, problem.gamma)
    U = E.members
    innovations = problem.y[None, :] - U @ problem.A.T - H
    updated = Ensemble(U + innovations @ K.T)

    noise = Ensemble(H)
    gamma_hat = sample_cov(noise)
    C_ue = sample_cross_cov(E, noise)
    O = offset(C_used, gamma_hat, C_ue, problem)
    return UpdateResult(
        ensemble=updated,
        mu_hat=updated.mean.copy(),
        sigma_hat=sample_cov(updated),
        method=method,
        diagnostics={"offset_norm": operator_norm(O), "gain": K},
    )


def po_update(E: Ensemble, problem: LinearProblem, seed=None, perturbations=None) -> UpdateResult:
    """
    Perturbed-observation update v_n = M(u_n, C_hat) - K(C_hat) eta_n.

    ``perturbations`` injects a fixed (N, k) eta set in place of fresh draws.
    """
    _check_ensemble(E, problem)
    H = _perturbations(problem, E.size, seed, perturbations)
    return _po_step(E, sample_cov(E), problem, H, "po")


def localized_po_update(
    E: Ensemble,
    problem: LinearProblem,
    loc: LocalizationConfig,
    seed=None,
    perturbations=None,
) -> UpdateResult:
    """PO update with C_hat replaced by positive_part(threshold(C_hat, rho))"""
    _check_ensemble(E, problem)
    C_hat = sample_cov(E)
    rho = loc.resolve(C_hat, E.size)
    H = _perturbations(problem, E.size, seed, perturbations)
    result = _po_step(E, localized_cov(C_hat, rho), problem, H, "loc-po")
    result.diagnostics["radius_used"] = rho
    return result


def _whitened_forward(problem: LinearProblem, X: np.ndarray) -> np.ndarray:
    """F = L^{-1} A X with Gamma = L L^T, so F^T F = X^T A^T Gamma^{-1} A X"""
    L = cholesky_pd(problem.gamma)
    return linalg.solve_triangular(L, problem.A @ X, lower=True)


def _symmetric_transform(X: np.ndarray, F: np.ndarray) -> np.ndarray:
    """X (I + F^T F)^{-1/2} through the thin SVD of F"""
    try:
        _, s, Vt = linalg.svd(F, full_matrices=False)
    except linalg.LinAlgError as e:
        raise NumericError(f"SVD of the whitened forward ensemble failed: {e}") from e
    shrink = 1.0 / np.sqrt(1.0 + s ** 2) - 1.0
    XV = X @ Vt.T
    return X + (XV * shrink) @ Vt


def _check_orthogonal(U, N: int) -> np.ndarray:
    U = as_matrix(U, "U")
    if U.shape != (N, N):
        raise InvalidInputError(f"U must be {N}x{N}, got {U.shape}")
    if np.max(np.abs(U.T @ U - np.eye(N))) > ORTHOGONALITY_TOL:
        raise InvalidInputError("U is not orthogonal")
    return U


def sr_backout(sigma_sqrt, mu_hat) -> Ensemble:
    """Members v_n = sqrt(N-1) [Sigma^{1/2}]_n + mu_hat from a d x N factor"""
    S = as_matrix(sigma_sqrt, "sigma_sqrt")
    mu = as_vector(mu_hat, "mu_hat")
    if S.shape[0] != mu.size:
        raise InvalidInputError(f"sigma_sqrt has {S.shape[0]} rows, expected {mu.size}")
    N = S.shape[1]
    return Ensemble(mu[None, :] + np.sqrt(N - 1) * S.T)


def _sr_result(sigma_sqrt: np.ndarray, mu_hat: np.ndarray, K: np.ndarray, method: str) -> UpdateResult:
    members = sr_backout(sigma_sqrt, mu_hat)
    drift = float(np.linalg.norm(members.mean - mu_hat))
    if drift > 1e-8 * (1.0 + np.linalg.norm(mu_hat)):
        logger.debug("%s back-out mean drift %.3e", method, drift)
    return UpdateResult(
        ensemble=members,
        mu_hat=mu_hat,
        sigma_hat=symmetrize(sigma_sqrt @ sigma_sqrt.T),
        method=method,
        diagnostics={"gain": K, "mean_drift": drift},
    )


def etkf_update(E: Ensemble, problem: LinearProblem, U=None, symmetric: bool = False) -> UpdateResult:
    """
    Ensemble transform square-root update.

    Sigma^{1/2} = C^{1/2} E (I + Lambda)^{-1/2} U with E Lambda E^T the
    eigendecomposition of C^{1/2 T} A^T Gamma^{-1} A C^{1/2} and U = I unless
    given. ``symmetric=True`` uses U = E^T instead, computed without the N x N
    eigendecomposition; it keeps the back-out mean exact.
    """
    _check_ensemble(E, problem)
    if symmetric and U is not None:
        raise InvalidInputError("Pass either U or symmetric=True, not both")
    X = E.sqrt_cov()
    F = _whitened_forward(problem, X)
    if symmetric:
        sigma_sqrt = _symmetric_transform(X, F)
    else:
        U = np.eye(E.size) if U is None else _check_orthogonal(U, E.size)
        eig = sym_eig(symmetrize(F.T @ F))
        lam = np.clip(eig.eigenvalues, 0.0, None)
        sigma_sqrt = X @ (eig.eigenvectors / np.sqrt(1.0 + lam)) @ U

    C_hat = sample_cov(E)
    K = kalman_gain(C_hat, problem.A, problem.gamma)
    mu_hat = E.mean + K @ (problem.y - problem.A @ E.mean)
    return _sr_result(sigma_sqrt, mu_hat, K, "etkf")


def _eakf_factor(X: np.ndarray, problem: LinearProblem) -> Tuple[np.ndarray, np.ndarray]:
    """Adjustment factor X (I + M M^T)^{-1/2} with M = X^T A^T Gamma^{-1/2}, and M"""
    M = (problem.A @ X).T @ inv_sqrt_spd(problem.gamma)
    return _symmetric_transform(X, M.T), M


def eakf_update(E: Ensemble, problem: LinearProblem) -> UpdateResult:
    """Ensemble adjustment square-root update, Sigma^{1/2} = C^{1/2} (I + M M^T)^{-1/2}"""
    _check_ensemble(E, problem)
    sigma_sqrt, _ = _eakf_factor(E.sqrt_cov(), problem)
    C_hat = sample_cov(E)
    K = kalman_gain(C_hat, problem.A, problem.gamma)
    mu_hat = E.mean + K @ (problem.y - problem.A @ E.mean)
    return _sr_result(sigma_sqrt, mu_hat, K, "eakf")


def eakf_adjustment_matrix(E: Ensemble, problem: LinearProblem) -> np.ndarray:
    """
    d x d pre-multiplier B = C^{1/2} T (C^{1/2})^dagger, T = (I + M M^T)^{-1/2}.

    B C^{1/2} equals the adjusted factor because M M^T acts inside the row
    space of C^{1/2}. Forms N x N matrices; meant for small instances.
    """
    _check_ensemble(E, problem)
    X = E.sqrt_cov()
    _, M = _eakf_factor(X, problem)
    T = inv_sqrt_spd(np.eye(E.size) + M @ M.T)
    return X @ T @ pseudo_inverse(X)


def localized_sr_update(E: Ensemble, problem: LinearProblem, loc: LocalizationConfig) -> UpdateResult:
    """
    Square-root update with C_rho = positive_part(threshold(C_hat, rho)).

    mu_hat = M(m_hat, C_rho) and sigma_hat = C(C_rho) through the d x d factor of
    C_rho. Members are the anomalies pre-multiplied by
    B_rho = Sigma_rho^{1/2} (C_rho^{1/2})^dagger, which reproduces sigma_hat
    exactly when C_rho = C_hat.
    """
    _check_ensemble(E, problem)
    C_hat = sample_cov(E)
    rho = loc.resolve(C_hat, E.size)
    C_rho = localized_cov(C_hat, rho)

    S_f = sqrt_factor(C_rho)
    S_a = _symmetric_transform(S_f, _whitened_forward(problem, S_f))
    K = kalman_gain(C_rho, problem.A, problem.gamma)
    mu_hat = E.mean + K @ (problem.y - problem.A @ E.mean)

    B = S_a @ pseudo_inverse(S_f)
    members = Ensemble(mu_hat[None, :] + E.anomalies @ B.T)
    return UpdateResult(
        ensemble=members,
        mu_hat=mu_hat,
        sigma_hat=symmetrize(S_a @ S_a.T),
        method="loc-sr",
        diagnostics={
            "gain": K,
            "radius_used": rho,
            "mean_drift": float(np.linalg.norm(members.mean - mu_hat)),
        },
    )


def sr_moments(E: Ensemble, problem: LinearProblem, rho: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """(M(m_hat, C), C(C)) with C the sample covariance, localized when rho is given"""
    _check_ensemble(E, problem)
    C = sample_cov(E)
    if rho is not None:
        C = localized_cov(C, rho)
    return mean_update(E.mean, C, problem), cov_update(C, problem.A, problem.gamma)
