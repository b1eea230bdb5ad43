"""
Operators
The exact Kalman operators (gain K, mean update M, covariance update C), the
nonlinear gain P of ensemble Kalman inversion, and evaluators for the
continuity/boundedness bounds these operators satisfy.

Solves go through a Cholesky factorization of (A C A^T + Gamma); no explicit
inverse is formed here.
"""

import logging
from dataclasses import asdict, dataclass
from functools import cached_property
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import linalg

from enkf_lab.exceptions import InvalidInputError, NotPositiveDefiniteError
from enkf_lab.matrix_kit import (
    as_matrix,
    as_vector,
    check_psd,
    check_shape,
    cholesky_pd,
    operator_norm,
    symmetrize,
)
from enkf_lab.models import GaussianPrior, random_spd

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LinearProblem:
    """Linear-Gaussian data model y = A u + eta, eta ~ N(0, Gamma)"""
    A: np.ndarray
    gamma: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        A = as_matrix(self.A, "A")
        gamma = as_matrix(self.gamma, "Gamma")
        y = as_vector(self.y, "y")
        k = A.shape[0]
        if gamma.shape != (k, k):
            raise InvalidInputError(f"Gamma must be {k}x{k} to match A {A.shape}, got {gamma.shape}")
        if y.size != k:
            raise InvalidInputError(f"y has length {y.size}, expected {k}")
        cholesky_pd(gamma)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "y", y)

    @property
    def state_dim(self) -> int:
        return self.A.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.A.shape[0]

    @cached_property
    def gamma_inv_norm(self) -> float:
        """||Gamma^{-1}|| = 1 / lambda_min(Gamma)"""
        return 1.0 / float(linalg.eigvalsh(self.gamma)[0])


@dataclass(frozen=True)
class BoundReport:
    """Right-hand sides of the continuity/boundedness bounds for a pair (P, Q)"""
    gain_bound: float
    gain_lipschitz: float
    gain_complement_bound: float
    mean_bound: float
    mean_lipschitz: float
    cov_lipschitz: float
    cov_bound: float
    nonlinear_gain_bound: float
    nonlinear_gain_lipschitz: float

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


def _check_cov(C, d: int) -> np.ndarray:
    C = as_matrix(C, "C")
    if C.shape != (d, d):
        raise InvalidInputError(f"C must be {d}x{d}, got {C.shape}")
    return C


def _solve_right(B: np.ndarray, S: np.ndarray) -> np.ndarray:
    """B S^{-1} for symmetric positive definite S"""
    try:
        factor = linalg.cho_factor(symmetrize(S), lower=True)
    except linalg.LinAlgError as e:
        raise NotPositiveDefiniteError(f"Innovation covariance is not positive definite: {e}") from e
    return linalg.cho_solve(factor, B.T).T


def kalman_gain(C, A, gamma) -> np.ndarray:
    """K(C) = C A^T (A C A^T + Gamma)^{-1}"""
    A = as_matrix(A, "A")
    gamma = as_matrix(gamma, "Gamma")
    C = _check_cov(C, A.shape[1])
    if gamma.shape != (A.shape[0], A.shape[0]):
        raise InvalidInputError(f"Gamma must be {A.shape[0]}x{A.shape[0]}, got {gamma.shape}")
    cholesky_pd(gamma)
    CAt = C @ A.T
    return _solve_right(CAt, A @ CAt + gamma)


def mean_update(m, C, problem: LinearProblem) -> np.ndarray:
    """M(m, C) = m + K(C)(y - A m)"""
    m = as_vector(m, "m")
    if m.size != problem.state_dim:
        raise InvalidInputError(f"m has length {m.size}, expected {problem.state_dim}")
    K = kalman_gain(C, problem.A, problem.gamma)
    return m + K @ (problem.y - problem.A @ m)


def cov_update(C, A, gamma) -> np.ndarray:
    """C(C) = (I - K(C) A) C, symmetrized"""
    A = as_matrix(A, "A")
    C = _check_cov(C, A.shape[1])
    K = kalman_gain(C, A, gamma)
    return symmetrize(C - K @ (A @ C))


def nonlinear_gain(C_up, C_pp, gamma, alpha: float = 1.0) -> np.ndarray:
    """P(C_up, C_pp) = alpha C_up (alpha C_pp + Gamma)^{-1}"""
    if not alpha > 0:
        raise InvalidInputError(f"alpha must be > 0, got {alpha}")
    C_pp = as_matrix(C_pp, "C_pp")
    gamma = as_matrix(gamma, "Gamma")
    k = gamma.shape[0]
    C_up = check_shape(C_up, (None, k), "C_up")
    if C_pp.shape != (k, k):
        raise InvalidInputError(f"C_pp must be {k}x{k}, got {C_pp.shape}")
    cholesky_pd(gamma)
    return _solve_right(alpha * C_up, alpha * C_pp + gamma)


def lipschitz_bounds(P, Q, problem: LinearProblem, m=None, m_prime=None) -> BoundReport:
    """
    Evaluate the continuity and boundedness bounds for K, M, C and P at (P, Q).

    The mean-update bounds use means m (paired with Q) and m' (paired with P),
    zero by default. The nonlinear-gain bounds are evaluated on the linear
    moments (Q A^T, A Q A^T) against (P A^T, A P A^T).
    """
    d = problem.state_dim
    P = check_psd(_check_cov(P, d), "P")
    Q = check_psd(_check_cov(Q, d), "Q")
    m = np.zeros(d) if m is None else as_vector(m, "m")
    m_prime = np.zeros(d) if m_prime is None else as_vector(m_prime, "m'")

    a = operator_norm(problem.A)
    g = problem.gamma_inv_norm
    nP, nQ = operator_norm(P), operator_norm(Q)
    dQP = operator_norm(Q - P)
    y = problem.y

    up_Q, pp_Q = Q @ problem.A.T, problem.A @ Q @ problem.A.T
    up_P, pp_P = P @ problem.A.T, problem.A @ P @ problem.A.T

    return BoundReport(
        gain_bound=nQ * a * g,
        gain_lipschitz=dQP * a * g * (1.0 + min(nP, nQ) * a ** 2 * g),
        gain_complement_bound=1.0 + nQ * a ** 2 * g,
        mean_bound=float(np.linalg.norm(m) + nQ * a * g * np.linalg.norm(y - problem.A @ m)),
        mean_lipschitz=float(
            np.linalg.norm(m - m_prime) * (1.0 + a ** 2 * g * nQ)
            + dQP * a * g * (1.0 + a ** 2 * g * nP) * np.linalg.norm(y - problem.A @ m_prime)
        ),
        cov_lipschitz=dQP * (1.0 + a ** 2 * g * (nQ + nP) + a ** 4 * g ** 2 * nQ * nP),
        cov_bound=nQ,
        nonlinear_gain_bound=g * operator_norm(up_Q) + g ** 2 * operator_norm(pp_Q),
        nonlinear_gain_lipschitz=g * operator_norm(up_Q - up_P) + g ** 2 * operator_norm(up_Q) * operator_norm(pp_Q - pp_P),
    )


def actual_deviations(P, Q, problem: LinearProblem, m=None, m_prime=None) -> BoundReport:
    """Left-hand sides matching each field of lipschitz_bounds"""
    d = problem.state_dim
    P, Q = _check_cov(P, d), _check_cov(Q, d)
    m = np.zeros(d) if m is None else as_vector(m, "m")
    m_prime = np.zeros(d) if m_prime is None else as_vector(m_prime, "m'")
    A, gamma = problem.A, problem.gamma

    K_P, K_Q = kalman_gain(P, A, gamma), kalman_gain(Q, A, gamma)
    P_P = nonlinear_gain(P @ A.T, A @ P @ A.T, gamma)
    P_Q = nonlinear_gain(Q @ A.T, A @ Q @ A.T, gamma)
    return BoundReport(
        gain_bound=operator_norm(K_Q),
        gain_lipschitz=operator_norm(K_Q - K_P),
        gain_complement_bound=operator_norm(np.eye(d) - K_Q @ A),
        mean_bound=float(np.linalg.norm(mean_update(m, Q, problem))),
        mean_lipschitz=float(np.linalg.norm(mean_update(m, Q, problem) - mean_update(m_prime, P, problem))),
        cov_lipschitz=operator_norm(cov_update(Q, A, gamma) - cov_update(P, A, gamma)),
        cov_bound=operator_norm(cov_update(Q, A, gamma)),
        nonlinear_gain_bound=operator_norm(P_Q),
        nonlinear_gain_lipschitz=operator_norm(P_Q - P_P),
    )


def random_linear_problem(
    d: int,
    k: int,
    rng: np.random.Generator,
    noise_scale: float = 1.0,
) -> Tuple[GaussianPrior, LinearProblem]:
    """Random PD prior and linear problem with data drawn from the model"""
    C = random_spd(d, rng)
    m = rng.standard_normal(d)
    A = rng.standard_normal((k, d)) / np.sqrt(d)
    gamma = noise_scale * random_spd(k, rng)
    truth = m + np.linalg.cholesky(C) @ rng.standard_normal(d)
    y = A @ truth + np.linalg.cholesky(gamma) @ rng.standard_normal(k)
    return GaussianPrior(m, C), LinearProblem(A, gamma, y)
