"""
Models
Gaussian priors, forward maps, structured covariance generators and seeded
Gaussian sampling.

Every sampling routine takes an explicit seed and builds its own
numpy Generator, so identical (seed, N, prior) always give identical output.
"""

import logging
from dataclasses import asdict, dataclass
from functools import cached_property
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy.optimize import brentq

from enkf_lab.exceptions import InvalidInputError, NotPositiveDefiniteError
from enkf_lab.matrix_kit import as_matrix, as_vector, check_psd, cholesky_pd, sqrt_factor

logger = logging.getLogger(__name__)

COVARIANCE_KINDS = ("identity", "diagonal-spectrum", "spectrum-decay", "ar1", "banded", "custom")


@dataclass(frozen=True, eq=False)
class GaussianPrior:
    """Prior N(m, C) on the unknown state"""
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = as_vector(self.mean, "prior mean")
        cov = check_psd(self.cov, "prior covariance")
        if cov.shape[0] != mean.size:
            raise InvalidInputError(
                f"Prior mean has dimension {mean.size} but covariance is {cov.shape}"
            )
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True, eq=False)
class Ensemble:
    """N particles in R^d stored row-wise, with cached first moments"""
    members: np.ndarray

    def __post_init__(self):
        members = np.asarray(self.members, dtype=float)
        if members.ndim == 1:
            members = members.reshape(-1, 1)
        if members.ndim != 2:
            raise InvalidInputError(f"Ensemble members must be an (N, d) array, got shape {members.shape}")
        if members.shape[0] < 2:
            raise InvalidInputError(f"Ensemble needs N >= 2 members, got {members.shape[0]}")
        if not np.all(np.isfinite(members)):
            raise InvalidInputError("Ensemble has non-finite entries")
        object.__setattr__(self, "members", members)

    @property
    def size(self) -> int:
        return self.members.shape[0]

    @property
    def dim(self) -> int:
        return self.members.shape[1]

    @cached_property
    def mean(self) -> np.ndarray:
        return self.members.mean(axis=0)

    @cached_property
    def anomalies(self) -> np.ndarray:
        """Members minus the sample mean, shape (N, d)"""
        return self.members - self.mean

    def sqrt_cov(self) -> np.ndarray:
        """The d x N factor (N-1)^(-1/2) [u_1 - m, ..., u_N - m]"""
        return self.anomalies.T / np.sqrt(self.size - 1)


@dataclass(frozen=True, eq=False)
class ForwardMap:
    """
    Evaluation contract u -> G(u) from R^d to R^k.

    ``func`` maps an (N, d) array to an (N, k) array. Linear maps carry their
    matrix and evaluate exactly as U @ A^T.
    """
    input_dim: int
    output_dim: int
    func: Optional[Callable[[np.ndarray], np.ndarray]] = None
    matrix: Optional[np.ndarray] = None
    lipschitz: Optional[float] = None
    jacobian_func: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.func is None and self.matrix is None:
            raise InvalidInputError("ForwardMap needs either func or matrix")
        if self.matrix is not None:
            A = as_matrix(self.matrix, "forward matrix")
            if A.shape != (self.output_dim, self.input_dim):
                raise InvalidInputError(
                    f"Forward matrix shape {A.shape} != ({self.output_dim}, {self.input_dim})"
                )
            object.__setattr__(self, "matrix", A)

    @property
    def is_linear(self) -> bool:
        return self.matrix is not None

    def evaluate(self, u) -> np.ndarray:
        """Evaluate on a single vector (d,) or on rows of an (N, d) array"""
        U = np.asarray(u, dtype=float)
        single = U.ndim == 1
        U = np.atleast_2d(U)
        if U.shape[1] != self.input_dim:
            raise InvalidInputError(f"Forward map expects dimension {self.input_dim}, got {U.shape[1]}")
        out = U @ self.matrix.T if self.matrix is not None else np.asarray(self.func(U), dtype=float)
        if not np.all(np.isfinite(out)):
            raise InvalidInputError("Forward map produced non-finite output")
        return out[0] if single else out

    def jacobian(self, u) -> np.ndarray:
        if self.matrix is not None:
            return self.matrix.copy()
        if self.jacobian_func is None:
            raise InvalidInputError("Forward map has no Jacobian")
        return self.jacobian_func(as_vector(u))


def linear_map(A) -> ForwardMap:
    A = as_matrix(A, "forward matrix")
    k, d = A.shape
    return ForwardMap(input_dim=d, output_dim=k, matrix=A, lipschitz=float(np.linalg.norm(A, 2)))


def banded_matrix(k: int, d: int, bandwidth: int = 1, value: float = 1.0) -> np.ndarray:
    """k x d matrix with ``value`` on diagonals 0..bandwidth-1 and zeros elsewhere"""
    if bandwidth < 1:
        raise InvalidInputError(f"bandwidth must be >= 1, got {bandwidth}")
    B = np.zeros((k, d))
    for offset in range(bandwidth):
        rows = np.arange(k)
        cols = rows + offset
        ok = cols < d
        B[rows[ok], cols[ok]] = value
    return B


def tanh_fixture(d: int, k: int, coupling: float = 0.1) -> ForwardMap:
    """
    Nonlinear test map G_j(u) = tanh(u_j) + coupling * u_{(j+1) mod d}, j < k.

    Lipschitz with constant 1 + |coupling| and a bandwidth-2 Jacobian, so it
    only acts on local subsets of u.
    """
    if not 1 <= k <= d:
        raise InvalidInputError(f"tanh fixture needs 1 <= k <= d, got k={k}, d={d}")
    rows = np.arange(k)
    shifted = (rows + 1) % d

    def func(U):
        return np.tanh(U[:, rows]) + coupling * U[:, shifted]

    def jac(u):
        J = np.zeros((k, d))
        J[rows, rows] = 1.0 / np.cosh(u[rows]) ** 2
        J[rows, shifted] += coupling
        return J

    return ForwardMap(input_dim=d, output_dim=k, func=func, lipschitz=1.0 + abs(coupling), jacobian_func=jac)


def expected_jacobian_tanh(prior: GaussianPrior, k: int, coupling: float = 0.1, order: int = 80) -> np.ndarray:
    """E[DG(u)] of the tanh fixture under the prior, by Gauss-Hermite quadrature"""
    d = prior.dim
    x, w = np.polynomial.hermite_e.hermegauss(order)
    w = w / np.sqrt(2.0 * np.pi)
    rows = np.arange(k)
    sd = np.sqrt(np.diag(prior.cov)[rows])
    nodes = prior.mean[rows, None] + sd[:, None] * x[None, :]
    J = np.zeros((k, d))
    J[rows, rows] = (w[None, :] / np.cosh(nodes) ** 2).sum(axis=1)
    J[rows, (rows + 1) % d] += coupling
    return J


@dataclass
class CovarianceSpec:
    """Recipe for a structured covariance matrix, serializable to configs"""
    kind: str
    d: Optional[int] = None
    eigenvalues: Optional[List[float]] = None
    phi: Optional[float] = None
    variance: float = 1.0
    bandwidth: Optional[int] = None
    values: Optional[List[float]] = None
    r2: Optional[float] = None
    matrix: Optional[List[List[float]]] = None

    @classmethod
    def from_dict(cls, data: Dict) -> "CovarianceSpec":
        if not isinstance(data, dict) or "kind" not in data:
            raise InvalidInputError("Covariance spec needs a 'kind'")
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise InvalidInputError(f"Unknown covariance spec fields: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> Dict:
        return {key: value for key, value in asdict(self).items() if value is not None}


def _decay_exponent(d: int, r2: float) -> float:
    """Exponent a with sum_j j^(-a) = r2 over j = 1..d"""
    j = np.arange(1, d + 1, dtype=float)
    if np.isclose(r2, d):
        return 0.0
    if np.isclose(r2, 1.0):
        return np.inf
    return brentq(lambda a: np.sum(j ** (-a)) - r2, 0.0, 200.0, xtol=1e-12)


def make_covariance(spec: CovarianceSpec) -> np.ndarray:
    """
    Build the covariance matrix described by ``spec``.

    ar1 gives C_ij = variance * phi^|i-j|; spectrum-decay gives a diagonal of
    variance * j^(-a) with the exponent chosen so that r2(C) hits spec.r2.
    """
    kind = spec.kind
    if kind not in COVARIANCE_KINDS:
        raise InvalidInputError(f"Unknown covariance kind '{kind}', expected one of {COVARIANCE_KINDS}")

    def need_dim():
        if spec.d is None or int(spec.d) < 1:
            raise InvalidInputError(f"Covariance kind '{kind}' needs d >= 1")
        return int(spec.d)

    if spec.variance is None or spec.variance < 0:
        raise InvalidInputError(f"variance must be >= 0, got {spec.variance}")

    if kind == "identity":
        C = np.eye(need_dim())
    elif kind == "diagonal-spectrum":
        if not spec.eigenvalues:
            raise InvalidInputError("diagonal-spectrum needs a non-empty eigenvalues list")
        lam = np.asarray(spec.eigenvalues, dtype=float)
        if np.any(lam < 0):
            raise InvalidInputError("diagonal-spectrum eigenvalues must be >= 0")
        C = np.diag(lam)
    elif kind == "spectrum-decay":
        d = need_dim()
        if spec.r2 is None or not 1.0 <= spec.r2 <= d:
            raise InvalidInputError(f"spectrum-decay needs 1 <= r2 <= d, got r2={spec.r2}")
        a = _decay_exponent(d, float(spec.r2))
        j = np.arange(1, d + 1, dtype=float)
        lam = j ** (-a)
        logger.debug("spectrum-decay d=%d r2=%.3f exponent=%.4f", d, spec.r2, a)
        C = spec.variance * np.diag(lam)
    elif kind == "ar1":
        d = need_dim()
        if spec.phi is None or not abs(spec.phi) < 1:
            raise InvalidInputError(f"ar1 needs |phi| < 1, got {spec.phi}")
        lags = np.abs(np.subtract.outer(np.arange(d), np.arange(d)))
        C = spec.variance * float(spec.phi) ** lags
    elif kind == "banded":
        d = need_dim()
        if not spec.values:
            raise InvalidInputError("banded needs values for the diagonal and sub-diagonals")
        bandwidth = spec.bandwidth if spec.bandwidth is not None else len(spec.values)
        if bandwidth != len(spec.values):
            raise InvalidInputError(f"banded bandwidth {bandwidth} != number of values {len(spec.values)}")
        C = np.zeros((d, d))
        for lag, value in enumerate(spec.values):
            if lag >= d:
                break
            idx = np.arange(d - lag)
            C[idx, idx + lag] = value
            C[idx + lag, idx] = value
    else:
        if spec.matrix is None:
            raise InvalidInputError("custom covariance needs a matrix")
        C = as_matrix(spec.matrix, "custom covariance")
    return check_psd(C, f"{kind} covariance")


def sampling_factor(C: np.ndarray) -> np.ndarray:
    try:
        return cholesky_pd(C)
    except NotPositiveDefiniteError:
        logger.debug("Covariance is singular, sampling through the eigenvalue square root")
        return sqrt_factor(C)


def sample_ensemble(prior: GaussianPrior, N: int, seed: int) -> Ensemble:
    """
    Draw N i.i.d. members m + L z_n, z_n standard normal from the seeded generator.

    L is the Cholesky factor of C, or the eigenvalue square root when C is singular.
    """
    if N < 2:
        raise InvalidInputError(f"Ensemble size must be >= 2, got {N}")
    L = sampling_factor(prior.cov)
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((N, prior.dim))
    return Ensemble(prior.mean + Z @ L.T)


def sample_noise(gamma, N: int, seed: int) -> Ensemble:
    """Draw N i.i.d. N(0, Gamma) perturbations"""
    gamma = check_psd(gamma, "noise covariance")
    return sample_ensemble(GaussianPrior(np.zeros(gamma.shape[0]), gamma), N, seed)


def random_spd(d: int, rng: np.random.Generator, ridge: float = 0.1) -> np.ndarray:
    """Random symmetric positive definite matrix G G^T / d + ridge * I"""
    G = rng.standard_normal((d, d))
    return G @ G.T / d + ridge * np.eye(d)


def random_psd(d: int, rng: np.random.Generator, rank: Optional[int] = None) -> np.ndarray:
    """Random PSD matrix of the given rank (full rank by default)"""
    rank = d if rank is None else rank
    G = rng.standard_normal((d, rank))
    return G @ G.T / max(rank, 1)


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix from the QR of a Gaussian matrix"""
    Q, R = np.linalg.qr(rng.standard_normal((n, n)))
    return Q * np.sign(np.diag(R))
