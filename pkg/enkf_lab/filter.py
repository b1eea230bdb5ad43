"""
Filter
Multi-step linear-Gaussian filtering without model noise: the exact Kalman
filter recursion and the square-root EnKF that replaces C^(t) by the forecast
ensemble's sample covariance.

    forecast:  m(t) = M(t) mu(t-1),  C(t) = M(t) Sigma(t-1) M(t)^T
    analysis:  mu(t) = M(m(t), C(t)),  Sigma(t) = C(C(t))
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from enkf_lab.exceptions import InvalidInputError
from enkf_lab.estimators import sample_cov
from enkf_lab.matrix_kit import as_matrix, as_vector, check_psd, cholesky_pd, symmetrize
from enkf_lab.models import Ensemble, GaussianPrior, random_orthogonal, sample_ensemble, sampling_factor
from enkf_lab.operators import LinearProblem, cov_update, mean_update
from enkf_lab.updates import etkf_update

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FilterProblem:
    """
    T assimilation steps with per-step dynamics M(t) (d x d), observation
    operators A(t) (k x d) and data y(t), a constant PD noise covariance Gamma
    and the initial law N(mean0, cov0).
    """
    dynamics: Sequence[np.ndarray]
    observations: Sequence[np.ndarray]
    data: Sequence[np.ndarray]
    gamma: np.ndarray
    mean0: np.ndarray
    cov0: np.ndarray

    def __post_init__(self):
        T = len(self.data)
        if T < 1:
            raise InvalidInputError("FilterProblem needs at least one step")
        if len(self.dynamics) != T or len(self.observations) != T:
            raise InvalidInputError(
                f"Step count mismatch: {len(self.dynamics)} dynamics, "
                f"{len(self.observations)} observation operators, {T} data vectors"
            )
        mean0 = as_vector(self.mean0, "mean0")
        cov0 = check_psd(self.cov0, "cov0")
        d = mean0.size
        if cov0.shape != (d, d):
            raise InvalidInputError(f"cov0 must be {d}x{d}, got {cov0.shape}")
        gamma = as_matrix(self.gamma, "Gamma")
        cholesky_pd(gamma)
        k = gamma.shape[0]

        dynamics, observations, data = [], [], []
        for t in range(T):
            M = as_matrix(self.dynamics[t], f"dynamics[{t}]")
            A = as_matrix(self.observations[t], f"observations[{t}]")
            y = as_vector(self.data[t], f"data[{t}]")
            if M.shape != (d, d):
                raise InvalidInputError(f"dynamics[{t}] must be {d}x{d}, got {M.shape}")
            if A.shape != (k, d):
                raise InvalidInputError(f"observations[{t}] must be {k}x{d}, got {A.shape}")
            if y.size != k:
                raise InvalidInputError(f"data[{t}] has length {y.size}, expected {k}")
            dynamics.append(M)
            observations.append(A)
            data.append(y)

        object.__setattr__(self, "dynamics", tuple(dynamics))
        object.__setattr__(self, "observations", tuple(observations))
        object.__setattr__(self, "data", tuple(data))
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "mean0", mean0)
        object.__setattr__(self, "cov0", cov0)

    @property
    def steps(self) -> int:
        return len(self.data)

    @property
    def state_dim(self) -> int:
        return self.mean0.size

    def step_problem(self, t: int) -> LinearProblem:
        return LinearProblem(self.observations[t], self.gamma, self.data[t])


@dataclass(eq=False)
class FilterTrace:
    forecast_means: List[np.ndarray] = field(default_factory=list)
    forecast_covs: List[np.ndarray] = field(default_factory=list)
    analysis_means: List[np.ndarray] = field(default_factory=list)
    analysis_covs: List[np.ndarray] = field(default_factory=list)
    mean_drift: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.analysis_means)


def kalman_filter(fp: FilterProblem) -> FilterTrace:
    """Exact Kalman recursion"""
    trace = FilterTrace()
    mu, Sigma = fp.mean0, fp.cov0
    for t in range(fp.steps):
        M = fp.dynamics[t]
        m = M @ mu
        C = symmetrize(M @ Sigma @ M.T)
        problem = fp.step_problem(t)
        mu = mean_update(m, C, problem)
        Sigma = cov_update(C, problem.A, problem.gamma)
        trace.forecast_means.append(m)
        trace.forecast_covs.append(C)
        trace.analysis_means.append(mu)
        trace.analysis_covs.append(Sigma)
        trace.mean_drift.append(0.0)
    return trace


def sr_enkf(fp: FilterProblem, N: int, seed) -> FilterTrace:
    """
    Square-root EnKF: members are propagated by M(t) and analysed with the
    symmetric ETKF and back-out, so the analysis sample covariance equals
    C(C_hat(t)) at every step.
    """
    E = sample_ensemble(GaussianPrior(fp.mean0, fp.cov0), N, seed)
    trace = FilterTrace()
    for t in range(fp.steps):
        E = Ensemble(E.members @ fp.dynamics[t].T)
        trace.forecast_means.append(E.mean.copy())
        trace.forecast_covs.append(sample_cov(E))
        result = etkf_update(E, fp.step_problem(t), symmetric=True)
        E = result.ensemble
        trace.analysis_means.append(result.mu_hat)
        trace.analysis_covs.append(result.sigma_hat)
        trace.mean_drift.append(result.diagnostics["mean_drift"])
    logger.debug("sr_enkf N=%d finished %d steps, max drift %.3e", N, fp.steps, max(trace.mean_drift))
    return trace


def simulate_filter_problem(
    d: int,
    k: int,
    T: int,
    rng: np.random.Generator,
    spectral_radius: float = 0.9,
    noise_scale: float = 1.0,
    prior: Optional[GaussianPrior] = None,
) -> Tuple[FilterProblem, List[np.ndarray]]:
    """
    Random stable system: M(t) = spectral_radius * Q(t) with Q(t) Haar
    orthogonal, A(t) Gaussian scaled by 1/sqrt(d), Gamma = noise_scale * I.
    The truth starts from a draw of the prior and is propagated without model
    noise; data are A(t) truth(t) + N(0, Gamma).

    Returns the problem and the truth trajectory.
    """
    if not 0 < spectral_radius < 1:
        raise InvalidInputError(f"spectral_radius must lie in (0, 1), got {spectral_radius}")
    if min(d, k, T) < 1:
        raise InvalidInputError(f"d, k, T must be >= 1, got {d}, {k}, {T}")
    if prior is None:
        prior = GaussianPrior(np.zeros(d), np.eye(d))
    gamma = noise_scale * np.eye(k)

    dynamics = [spectral_radius * random_orthogonal(d, rng) for _ in range(T)]
    observations = [rng.standard_normal((k, d)) / np.sqrt(d) for _ in range(T)]
    truth = prior.mean + sampling_factor(prior.cov) @ rng.standard_normal(d)
    truths, data = [], []
    for t in range(T):
        truth = dynamics[t] @ truth
        truths.append(truth)
        data.append(observations[t] @ truth + np.sqrt(noise_scale) * rng.standard_normal(k))
    fp = FilterProblem(dynamics, observations, data, gamma, prior.mean, prior.cov)
    return fp, truths
