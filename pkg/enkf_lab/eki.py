"""
EKI
Ensemble Kalman inversion for the data-misfit objective
J(u) = 1/2 |Gamma^{-1/2}(y - G(u))|^2: statistical linearization, the EKI
and localized EKI (LEKI) steps, the mean-field step driven by population
moments, and Monte Carlo estimates of those moments for nonlinear maps.

All steps share the nonlinear gain P = alpha C_up (alpha C_pp + Gamma)^{-1}.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import linalg

from enkf_lab.estimators import positive_part, sample_cov, sample_cross_cov, threshold
from enkf_lab.exceptions import InvalidInputError
from enkf_lab.matrix_kit import (
    as_matrix,
    as_vector,
    check_psd,
    check_shape,
    cholesky_pd,
    pseudo_inverse,
    symmetrize,
)
from enkf_lab.models import Ensemble, ForwardMap, GaussianPrior, sample_noise, sampling_factor
from enkf_lab.operators import nonlinear_gain
from enkf_lab.updates import UpdateResult

logger = logging.getLogger(__name__)

MC_CHUNK = 20_000


@dataclass(frozen=True, eq=False)
class EkiProblem:
    """Forward map, PD noise covariance Gamma, data y and step weight alpha"""
    forward: ForwardMap
    gamma: np.ndarray
    y: np.ndarray
    alpha: float = 1.0

    def __post_init__(self):
        gamma = as_matrix(self.gamma, "Gamma")
        y = as_vector(self.y, "y")
        k = self.forward.output_dim
        if gamma.shape != (k, k):
            raise InvalidInputError(f"Gamma must be {k}x{k}, got {gamma.shape}")
        if y.size != k:
            raise InvalidInputError(f"y has length {y.size}, expected {k}")
        if not self.alpha > 0:
            raise InvalidInputError(f"alpha must be > 0, got {self.alpha}")
        cholesky_pd(gamma)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "y", y)

    @property
    def state_dim(self) -> int:
        return self.forward.input_dim

    @property
    def obs_dim(self) -> int:
        return self.forward.output_dim


@dataclass(frozen=True, eq=False)
class PopulationMoments:
    """Population cross-covariance C_up (d x k), prediction covariance C_pp and mean of G"""
    C_up: np.ndarray
    C_pp: np.ndarray
    mean_G: np.ndarray

    def __post_init__(self):
        C_pp = check_psd(self.C_pp, "C_pp")
        C_up = check_shape(self.C_up, (None, C_pp.shape[0]), "C_up")
        object.__setattr__(self, "C_pp", C_pp)
        object.__setattr__(self, "C_up", C_up)
        object.__setattr__(self, "mean_G", as_vector(self.mean_G, "mean_G"))


def _weighted_norm_sq(r: np.ndarray, gamma: np.ndarray) -> float:
    z = linalg.solve_triangular(cholesky_pd(gamma), r, lower=True)
    return float(z @ z)


def data_misfit(u, prob: EkiProblem) -> float:
    """J(u) = 1/2 |Gamma^{-1/2}(y - G(u))|^2"""
    r = prob.y - prob.forward.evaluate(as_vector(u, "u"))
    return 0.5 * _weighted_norm_sq(r, prob.gamma)


def lm_objective(w, u_n, eta_n, G_mat, C_hat, prob: EkiProblem) -> float:
    """
    Linearized Levenberg-Marquardt objective around u_n:

        1/2 |Gamma^{-1/2}(y - eta_n - G(u_n) - G w)|^2 + 1/(2 alpha) w^T C_hat^dagger w
    """
    w = as_vector(w, "w")
    G_mat = check_shape(G_mat, (prob.obs_dim, w.size), "G")
    r = prob.y - as_vector(eta_n, "eta_n") - prob.forward.evaluate(as_vector(u_n, "u_n")) - G_mat @ w
    prior_term = float(w @ pseudo_inverse(C_hat) @ w)
    return 0.5 * _weighted_norm_sq(r, prob.gamma) + prior_term / (2.0 * prob.alpha)


def statistical_linearization(E: Ensemble, G_values: Ensemble) -> np.ndarray:
    """Ensemble Jacobian proxy G = (C_up)^T C_hat^dagger, exact for linear maps when C_hat is full rank"""
    C_up = sample_cross_cov(E, G_values)
    return C_up.T @ pseudo_inverse(sample_cov(E))


def _perturbations(prob: EkiProblem, N: int, seed, perturbations) -> np.ndarray:
    if perturbations is None:
        if seed is None:
            raise InvalidInputError("A seed is required when perturbations are not supplied")
        return sample_noise(prob.gamma, N, seed).members
    return check_shape(perturbations, (N, prob.obs_dim), "Perturbations")


def _gain_step(E: Ensemble, G: np.ndarray, H: np.ndarray, C_up, C_pp, prob: EkiProblem, method: str, **diagnostics) -> UpdateResult:
    P = nonlinear_gain(C_up, C_pp, prob.gamma, prob.alpha)
    innovations = prob.y[None, :] - G - H
    updated = Ensemble(E.members + innovations @ P.T)
    return UpdateResult(
        ensemble=updated,
        mu_hat=updated.mean.copy(),
        sigma_hat=sample_cov(updated),
        method=method,
        diagnostics={"gain": P, **diagnostics},
    )


def _check_ensemble(E: Ensemble, prob: EkiProblem):
    if E.dim != prob.state_dim:
        raise InvalidInputError(f"Ensemble dimension {E.dim} != forward input dimension {prob.state_dim}")


def eki_update(E: Ensemble, prob: EkiProblem, seed=None, perturbations=None) -> UpdateResult:
    """v_n = u_n + P(C_up, C_pp)(y - G(u_n) - eta_n) with sample moments"""
    _check_ensemble(E, prob)
    G = prob.forward.evaluate(E.members)
    H = _perturbations(prob, E.size, seed, perturbations)
    G_ens = Ensemble(G)
    return _gain_step(E, G, H, sample_cross_cov(E, G_ens), sample_cov(G_ens), prob, "eki")


def leki_update(
    E: Ensemble,
    prob: EkiProblem,
    rho_up: float,
    rho_pp: float,
    seed=None,
    perturbations=None,
) -> UpdateResult:
    """EKI step with threshold(C_up, rho_up) and positive_part(threshold(C_pp, rho_pp))"""
    if rho_up < 0 or rho_pp < 0:
        raise InvalidInputError(f"Localization radii must be >= 0, got {rho_up}, {rho_pp}")
    _check_ensemble(E, prob)
    G = prob.forward.evaluate(E.members)
    H = _perturbations(prob, E.size, seed, perturbations)
    G_ens = Ensemble(G)
    C_up = threshold(sample_cross_cov(E, G_ens), rho_up)
    C_pp = positive_part(threshold(sample_cov(G_ens), rho_pp))
    return _gain_step(E, G, H, C_up, C_pp, prob, "leki", radius_up=float(rho_up), radius_pp=float(rho_pp))


def mean_field_update(u_n, eta_n, pop: PopulationMoments, prob: EkiProblem) -> np.ndarray:
    """v*_n = u_n + P(C_up, C_pp)(y - G(u_n) - eta_n) with population moments"""
    u = as_vector(u_n, "u_n")
    eta = as_vector(eta_n, "eta_n")
    P = nonlinear_gain(pop.C_up, pop.C_pp, prob.gamma, prob.alpha)
    return u + P @ (prob.y - prob.forward.evaluate(u) - eta)


def population_moments_linear(prior: GaussianPrior, A) -> PopulationMoments:
    """Closed forms C_up = C A^T, C_pp = A C A^T, E[G] = A m"""
    A = as_matrix(A, "A")
    if A.shape[1] != prior.dim:
        raise InvalidInputError(f"A has {A.shape[1]} columns, expected {prior.dim}")
    C_up = prior.cov @ A.T
    return PopulationMoments(C_up=C_up, C_pp=symmetrize(A @ C_up), mean_G=A @ prior.mean)


def population_moments_mc(
    prior: GaussianPrior,
    forward: ForwardMap,
    N_ref: int,
    seed,
    chunk: int = MC_CHUNK,
) -> PopulationMoments:
    """
    Sample moments of (u, G(u)) at N_ref prior draws, accumulated in chunks.

    Standard error is of order N_ref^{-1/2}. Sums are taken around the
    prior mean and G(prior mean) to limit cancellation.
    """
    if N_ref < 2:
        raise InvalidInputError(f"N_ref must be >= 2, got {N_ref}")
    if forward.input_dim != prior.dim:
        raise InvalidInputError(f"Forward map expects dimension {forward.input_dim}, prior has {prior.dim}")
    if N_ref < 100_000:
        logger.debug("population_moments_mc with N_ref=%d is below the recommended 1e5", N_ref)
    d, k = prior.dim, forward.output_dim
    L = sampling_factor(prior.cov)
    rng = np.random.default_rng(seed)
    g0 = forward.evaluate(prior.mean)

    s_u, s_g = np.zeros(d), np.zeros(k)
    s_ug, s_gg = np.zeros((d, k)), np.zeros((k, k))
    done = 0
    while done < N_ref:
        n = min(chunk, N_ref - done)
        Du = rng.standard_normal((n, d)) @ L.T
        Dg = forward.evaluate(prior.mean + Du) - g0
        s_u += Du.sum(axis=0)
        s_g += Dg.sum(axis=0)
        s_ug += Du.T @ Dg
        s_gg += Dg.T @ Dg
        done += n

    mu_u, mu_g = s_u / N_ref, s_g / N_ref
    C_up = (s_ug - N_ref * np.outer(mu_u, mu_g)) / (N_ref - 1)
    C_pp = (s_gg - N_ref * np.outer(mu_g, mu_g)) / (N_ref - 1)
    return PopulationMoments(C_up=C_up, C_pp=symmetrize(C_pp), mean_G=g0 + mu_g)


def iterate_eki(
    E: Ensemble,
    prob: EkiProblem,
    n_iter: int,
    seed,
    rho_up: Optional[float] = None,
    rho_pp: Optional[float] = None,
) -> Tuple[Ensemble, List[float]]:
    """
    Repeat EKI steps (LEKI steps when both radii are given).

    Returns the final ensemble and the data misfit of the ensemble mean before
    the first step and after each step. Per-step seeds are spawned from ``seed``.
    """
    if n_iter < 0:
        raise InvalidInputError(f"n_iter must be >= 0, got {n_iter}")
    localized = rho_up is not None and rho_pp is not None
    if (rho_up is None) != (rho_pp is None):
        raise InvalidInputError("Give both rho_up and rho_pp, or neither")
    step_seeds = np.random.SeedSequence(seed).generate_state(max(n_iter, 1), dtype=np.uint64)

    history = [data_misfit(E.mean, prob)]
    for i in range(n_iter):
        step_seed = int(step_seeds[i])
        if localized:
            E = leki_update(E, prob, rho_up, rho_pp, seed=step_seed).ensemble
        else:
            E = eki_update(E, prob, seed=step_seed).ensemble
        history.append(data_misfit(E.mean, prob))
        logger.debug("EKI iteration %d: misfit %.6g", i + 1, history[-1])
    return E, history
