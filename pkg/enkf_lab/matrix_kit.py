"""
Matrix Kit
Dense symmetric/rectangular matrix primitives shared by every other module:
norms, symmetric eigendecomposition, square-root factors, pseudo-inverse and
Cholesky with PD checking.

All functions are pure and accept anything numpy can turn into a float array.
Scalars and vectors are promoted to 2-D so that the scalar examples used
throughout the tests (C=2, A=1, Gamma=2) work unchanged.
"""

import logging
from typing import NamedTuple, Optional, Tuple

import numpy as np
from scipy import linalg

from enkf_lab.exceptions import (
    InvalidInputError,
    NotPositiveDefiniteError,
    NotPSDError,
    NumericError,
)

logger = logging.getLogger(__name__)

SYMMETRY_RTOL = 1e-10
PSD_RTOL = 1e-8


class SpectralDecomposition(NamedTuple):
    """Eigenvalues in descending order with matching orthonormal eigenvector columns"""
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.eigenvectors * self.eigenvalues) @ self.eigenvectors.T


def as_matrix(M, name: str = "matrix") -> np.ndarray:
    """
    Convert input to a finite 2-D float array.

    Scalars become 1x1 and vectors become column matrices.

    Raises:
        InvalidInputError: if the result is empty or holds non-finite entries
    """
    arr = np.asarray(M, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim > 2:
        raise InvalidInputError(f"{name} must be at most 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInputError(f"{name} must have at least one row and column, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return arr


def check_shape(M, shape: Tuple[Optional[int], int], name: str = "matrix") -> np.ndarray:
    """
    as_matrix with an expected (rows, cols) shape; rows may be None.

    A 1-D input is read as a single row when its length is cols > 1, and as
    a column otherwise. Nothing is ever reshaped across rows.

    Raises:
        InvalidInputError: naming the expected and actual shapes
    """
    rows, cols = shape
    arr = np.asarray(M, dtype=float)
    if arr.ndim == 1 and cols > 1 and arr.size == cols:
        arr = arr.reshape(1, cols)
    arr = as_matrix(arr, name)
    if arr.shape[1] != cols or (rows is not None and arr.shape[0] != rows):
        expected = f"({'any' if rows is None else rows}, {cols})"
        raise InvalidInputError(f"{name} must have shape {expected}, got {arr.shape}")
    return arr


def as_vector(v, name: str = "vector") -> np.ndarray:
    """Convert input to a finite 1-D float array"""
    arr = np.atleast_1d(np.asarray(v, dtype=float)).ravel()
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return arr


def symmetrize(S) -> np.ndarray:
    S = as_matrix(S)
    return 0.5 * (S + S.T)


def check_symmetric(S, name: str = "matrix") -> np.ndarray:
    """
    Validate symmetry to the relative tolerance 1e-10 * (1 + max|S_ij|).

    Returns the input as a float array.
    """
    S = as_matrix(S, name)
    if S.shape[0] != S.shape[1]:
        raise InvalidInputError(f"{name} must be square, got shape {S.shape}")
    asym = np.max(np.abs(S - S.T))
    if asym > SYMMETRY_RTOL * (1.0 + np.max(np.abs(S))):
        raise InvalidInputError(f"{name} is not symmetric (max asymmetry {asym:.3e})")
    return S


def operator_norm(M) -> float:
    """Largest singular value"""
    M = as_matrix(M)
    return float(linalg.svdvals(M)[0])


def max_norm(M) -> float:
    """Largest absolute entry"""
    return float(np.max(np.abs(as_matrix(M))))


def linf_induced_norm(M) -> float:
    """Largest absolute row sum (the l-infinity induced norm)"""
    return float(np.max(np.sum(np.abs(as_matrix(M)), axis=1)))


def sym_eig(S) -> SpectralDecomposition:
    """
    Symmetric eigendecomposition with eigenvalues sorted descending.

    Raises:
        InvalidInputError: if S is not symmetric
        NumericError: if LAPACK fails to converge
    """
    S = check_symmetric(S)
    try:
        w, V = linalg.eigh(S)
    except linalg.LinAlgError as e:
        raise NumericError(f"Symmetric eigendecomposition failed: {e}") from e
    order = np.argsort(w)[::-1]
    return SpectralDecomposition(w[order], V[:, order])


def sqrt_factor(S) -> np.ndarray:
    """
    Square-root factor X of a PSD matrix with X X^T = S.

    Eigenvalues in [-1e-8 * max(1, lambda_max), 0) are rounding noise from
    rank-deficient sample covariances and are clamped to zero.

    Raises:
        NotPSDError: if an eigenvalue falls below the tolerance
    """
    eig = sym_eig(S)
    w = eig.eigenvalues
    scale = max(1.0, float(w[0]))
    if w[-1] < -PSD_RTOL * scale:
        raise NotPSDError(f"Matrix is not PSD (min eigenvalue {w[-1]:.3e})")
    if w[-1] < 0:
        logger.debug("Clamping %d tiny negative eigenvalues", int(np.sum(w < 0)))
    w = np.clip(w, 0.0, None)
    return eig.eigenvectors * np.sqrt(w)


def check_psd(S, name: str = "matrix") -> np.ndarray:
    """Validate symmetry and positive semidefiniteness, returning the symmetrized matrix"""
    S = check_symmetric(S, name)
    w = sym_eig(S).eigenvalues
    if w[-1] < -PSD_RTOL * max(1.0, float(w[0])):
        raise NotPSDError(f"{name} is not PSD (min eigenvalue {w[-1]:.3e})")
    return symmetrize(S)


def pseudo_inverse(M, tol: Optional[float] = None) -> np.ndarray:
    """
    Moore-Penrose pseudo-inverse via a thin SVD.

    Singular values at or below ``tol`` are treated as zero. The default
    tolerance is eps * max(rows, cols) * sigma_max.
    """
    M = as_matrix(M)
    if tol is not None and tol < 0:
        raise InvalidInputError(f"tol must be >= 0, got {tol}")
    try:
        U, s, Vt = linalg.svd(M, full_matrices=False)
    except linalg.LinAlgError as e:
        raise NumericError(f"SVD failed: {e}") from e
    if tol is None:
        tol = np.finfo(float).eps * max(M.shape) * (s[0] if s.size else 0.0)
    s_inv = np.zeros_like(s)
    keep = s > tol
    s_inv[keep] = 1.0 / s[keep]
    return (Vt.T * s_inv) @ U.T


def cholesky_pd(S) -> np.ndarray:
    """
    Lower-triangular Cholesky factor L with L L^T = S.

    Raises:
        NotPositiveDefiniteError: on a non-positive pivot
    """
    S = check_symmetric(S)
    try:
        return linalg.cholesky(S, lower=True)
    except linalg.LinAlgError as e:
        raise NotPositiveDefiniteError(f"Matrix is not positive definite: {e}") from e


def inv_sqrt_spd(S) -> np.ndarray:
    """Symmetric inverse square root of a positive definite matrix"""
    eig = sym_eig(S)
    w = eig.eigenvalues
    if w[-1] <= 0:
        raise NotPositiveDefiniteError(f"Matrix is not positive definite (min eigenvalue {w[-1]:.3e})")
    V = eig.eigenvectors
    return (V / np.sqrt(w)) @ V.T
