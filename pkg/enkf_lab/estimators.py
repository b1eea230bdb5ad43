"""
Estimators
Sample and localized (thresholded) covariance estimators, the positive-part
projection, effective dimensions r2 and r_inf, localization radii prescribed
by the estimation bounds, and soft-sparsity diagnostics.

Logarithms are natural throughout. Covariances use the unbiased N-1 divisor.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from enkf_lab.exceptions import InvalidInputError
from enkf_lab.matrix_kit import (
    as_matrix,
    check_symmetric,
    linf_induced_norm,
    max_norm,
    operator_norm,
    sym_eig,
    symmetrize,
)
from enkf_lab.models import Ensemble

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EffectiveDims:
    r2: float
    r_inf: float
    trace: float
    op_norm: float
    max_diag: float


@dataclass(frozen=True)
class SparsityClass:
    """Matrices whose rows satisfy sum_j |B_ij|^q <= R_q"""
    q: float
    R_q: float

    def __post_init__(self):
        if not 0.0 <= self.q < 1.0:
            raise InvalidInputError(f"q must lie in [0, 1), got {self.q}")
        if not self.R_q > 0:
            raise InvalidInputError(f"R_q must be > 0, got {self.R_q}")

    def contains(self, B) -> bool:
        return row_lq_norm(B, self.q) <= self.R_q


@dataclass(frozen=True)
class LocalizationConfig:
    """
    Localization radius, either explicit or derived from (t, c) through the
    covariance-estimation radius with plug-in estimates of Sigma_(1) and r_inf.
    """
    radius: Optional[float] = None
    t: Optional[float] = None
    c: Optional[float] = None

    def __post_init__(self):
        explicit = self.radius is not None
        derived = self.t is not None or self.c is not None
        if explicit == derived:
            raise InvalidInputError("LocalizationConfig needs exactly one of radius or (t, c)")
        if explicit and self.radius < 0:
            raise InvalidInputError(f"radius must be >= 0, got {self.radius}")

    def resolve(self, C_hat, N: int) -> float:
        if self.radius is not None:
            return float(self.radius)
        dims = effective_dims(C_hat)
        rho = theorem_radius_cov(
            dims.max_diag,
            dims.r_inf,
            N,
            t=1.0 if self.t is None else self.t,
            c=1.0 if self.c is None else self.c,
        )
        logger.debug("Derived localization radius %.4g (N=%d, r_inf=%.3f)", rho, N, dims.r_inf)
        return rho


def sample_mean(E: Ensemble) -> np.ndarray:
    """Arithmetic mean of the members"""
    return E.mean.copy()


def sample_cov(E: Ensemble) -> np.ndarray:
    """Sample covariance with divisor N-1"""
    X = E.anomalies
    return symmetrize(X.T @ X / (E.size - 1))


def sample_cross_cov(X: Ensemble, Y: Ensemble) -> np.ndarray:
    """d x k sample cross-covariance of paired ensembles"""
    if X.size != Y.size:
        raise InvalidInputError(f"Cross-covariance needs equal ensemble sizes, got {X.size} and {Y.size}")
    return X.anomalies.T @ Y.anomalies / (X.size - 1)


def threshold(B, rho: float) -> np.ndarray:
    """Keep entries with |B_ij| >= rho, zero the rest"""
    if rho < 0:
        raise InvalidInputError(f"Localization radius must be >= 0, got {rho}")
    B = as_matrix(B)
    return np.where(np.abs(B) >= rho, B, 0.0)


def positive_part(S) -> np.ndarray:
    """Projection onto the PSD cone by clipping negative eigenvalues"""
    eig = sym_eig(symmetrize(check_symmetric(S)))
    w = np.clip(eig.eigenvalues, 0.0, None)
    V = eig.eigenvectors
    return symmetrize((V * w) @ V.T)


def localized_cov(C_hat, rho: float) -> np.ndarray:
    """Thresholded covariance followed by the positive-part projection"""
    return positive_part(threshold(C_hat, rho))


def effective_dims(S) -> EffectiveDims:
    """
    r2 = trace / ||S|| and r_inf = max_j S_(j) log(j+1) / S_(1) over the
    decreasingly sorted diagonal.
    """
    S = check_symmetric(S)
    op = operator_norm(S)
    if op == 0.0:
        raise InvalidInputError("Effective dimensions are undefined for the zero matrix")
    diag = np.sort(np.diag(S))[::-1]
    if diag[0] <= 0:
        raise InvalidInputError("Effective dimensions need a positive diagonal entry")
    j = np.arange(1, diag.size + 1)
    return EffectiveDims(
        r2=float(np.trace(S) / op),
        r_inf=float(np.max(diag * np.log(j + 1)) / diag[0]),
        trace=float(np.trace(S)),
        op_norm=op,
        max_diag=float(diag[0]),
    )


def _check_radius_args(N, t, c):
    if N < 1:
        raise InvalidInputError(f"N must be >= 1, got {N}")
    if t < 1:
        raise InvalidInputError(f"t must be >= 1, got {t}")
    if not c > 0:
        raise InvalidInputError(f"c must be > 0, got {c}")


def theorem_radius_cov(
    max_diag: float,
    r_inf: float,
    N: int,
    t: float = 1.0,
    c: float = 1.0,
    shift: float = 0.0,
) -> float:
    """Radius for localized covariance estimation: Sigma_(1) (sqrt(r/N) v t r/N v sqrt(t/N) v t/N)"""
    _check_radius_args(N, t, c)
    rate = max(np.sqrt(r_inf / N), t * r_inf / N, np.sqrt(t / N), t / N)
    return float(shift + c * max_diag * rate)


def theorem_radius_cross(
    max_diag_u: float,
    max_diag_p: float,
    rinf_u: float,
    rinf_p: float,
    N: int,
    t: float = 1.0,
    c: float = 1.0,
    shift: float = 0.0,
) -> float:
    """Radius for localized cross-covariance estimation"""
    _check_radius_args(N, t, c)
    tail = max(t / N, np.sqrt(t / N)) * max(np.sqrt(rinf_u), np.sqrt(rinf_p))
    product = np.sqrt(rinf_u / N) * np.sqrt(rinf_p / N)
    return float(shift + c * max(max_diag_u, max_diag_p) * max(tail, product))


def theorem_radius_pp(max_diag_p: float, rinf_p: float, N: int, t: float = 1.0, c: float = 1.0, shift: float = 0.0) -> float:
    """Third LEKI radius, for the prediction covariance"""
    return theorem_radius_cov(max_diag_p, rinf_p, N, t=t, c=c, shift=shift)


def row_lq_norm(B, q: float) -> float:
    """max_i sum_j |B_ij|^q, with |x|^0 read as the indicator x != 0"""
    if not 0.0 <= q < 1.0:
        raise InvalidInputError(f"q must lie in [0, 1), got {q}")
    absB = np.abs(as_matrix(B))
    if q == 0.0:
        powered = (absB != 0).astype(float)
    else:
        powered = absB ** q
    return float(np.max(powered.sum(axis=1)))


def two_product_sparsity_bound(B, S, q: float) -> float:
    """
    Row-sum bound for B S: b s ||B||_max^(1-q) ||S||_max^(1-q), where b and s
    are the row l_q sums of B and S. It controls linf_induced_norm(B @ S).
    """
    B, S = as_matrix(B, "B"), as_matrix(S, "S")
    if B.shape[1] != S.shape[0]:
        raise InvalidInputError(f"Cannot multiply {B.shape} by {S.shape}")
    return row_lq_norm(B, q) * row_lq_norm(S, q) * max_norm(B) ** (1 - q) * max_norm(S) ** (1 - q)


def three_product_sparsity_bound(B, S, q: float) -> float:
    """
    Row-sum bound for B S B^T: b1 b2 s ||B||_max^(2(1-q)) ||S||_max^(1-q),
    with b1, b2 the row l_q sums of B and B^T.
    """
    B = as_matrix(B)
    S = check_symmetric(S)
    return (
        row_lq_norm(B, q) * row_lq_norm(B.T, q) * row_lq_norm(S, q)
        * max_norm(B) ** (2 * (1 - q)) * max_norm(S) ** (1 - q)
    )


def stein_cross_sparsity_bound(C, expected_jacobian, q: float) -> float:
    """
    Row-sum bound for C^{up} = C E[DG]^T of a Gaussian state. The row l_q
    sums of E[DG]^T are the column sums of the expected Jacobian.
    """
    J = as_matrix(expected_jacobian, "expected_jacobian")
    return two_product_sparsity_bound(check_symmetric(C), J.T, q)


def product_sparsity_holds(B, S, q: float, slack: float = 1e-12) -> bool:
    """Check linf_induced_norm(B S B^T) against three_product_sparsity_bound"""
    B = as_matrix(B)
    lhs = linf_induced_norm(B @ as_matrix(S) @ B.T)
    return lhs <= three_product_sparsity_bound(B, S, q) + slack
