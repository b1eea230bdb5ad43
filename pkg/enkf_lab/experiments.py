"""
Experiments
Monte Carlo harness turning the error bounds into falsifiable checks:
seeded trials over an N grid, log-log rate fits of median errors, paired
win rates between methods, calibrated bound curves and preset checks.

Trial i of an experiment uses the seed mix_seed(master_seed, id, i) for every
N and every prior in the sweep, so methods and ensemble sizes are compared on
common random numbers.
"""

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy import stats

from enkf_lab.eki import EkiProblem, eki_update, leki_update, mean_field_update
from enkf_lab.estimators import (
    LocalizationConfig,
    effective_dims,
    positive_part,
    row_lq_norm,
    sample_cov,
    sample_cross_cov,
    stein_cross_sparsity_bound,
    theorem_radius_cov,
    theorem_radius_cross,
    theorem_radius_pp,
    threshold,
    three_product_sparsity_bound,
)
from enkf_lab.exceptions import ConfigError, EnkfLabError, ExperimentError, InvalidInputError
from enkf_lab.filter import kalman_filter, simulate_filter_problem, sr_enkf
from enkf_lab.matrix_kit import linf_induced_norm, operator_norm
from enkf_lab.models import (
    CovarianceSpec,
    Ensemble,
    GaussianPrior,
    banded_matrix,
    linear_map,
    make_covariance,
    sampling_factor,
    sample_ensemble,
    sample_noise,
    tanh_fixture,
)
from enkf_lab.operators import LinearProblem, cov_update, kalman_gain, mean_update, nonlinear_gain, random_linear_problem
from enkf_lab.oracle import exact_posterior, mean_field_reference, po_covariance_expansion
from enkf_lab.updates import (
    eakf_update,
    etkf_update,
    localized_po_update,
    localized_sr_update,
    offset,
    po_update,
)

logger = logging.getLogger(__name__)

EXPERIMENT_KINDS = (
    "mean_rate",
    "cov_rate",
    "po_vs_sr",
    "loc_vs_sample",
    "eki_meanfield",
    "leki_vs_eki",
    "multistep_rate",
    "radius_sweep",
    "property_checks",
)
UPDATE_METHODS = ("po", "etkf", "eakf", "loc-po", "loc-sr")
ESTIMATOR_METHODS = ("sample", "localized")
PROPERTY_CHECKS = ("posterior", "sr_consistency", "po_identity", "positive_part", "eki_po", "sparsity")

ALLOWED_METHODS = {
    "mean_rate": UPDATE_METHODS,
    "cov_rate": UPDATE_METHODS,
    "po_vs_sr": UPDATE_METHODS,
    "loc_vs_sample": UPDATE_METHODS + ESTIMATOR_METHODS,
    "eki_meanfield": ("eki", "leki"),
    "leki_vs_eki": ("eki", "leki"),
    "multistep_rate": ("sr-enkf",),
    "radius_sweep": ESTIMATOR_METHODS,
    "property_checks": PROPERTY_CHECKS,
}
DEFAULT_METHODS = {
    "mean_rate": ["etkf"],
    "cov_rate": ["etkf"],
    "po_vs_sr": ["etkf", "po"],
    "loc_vs_sample": ["localized", "sample"],
    "eki_meanfield": ["eki"],
    "leki_vs_eki": ["leki", "eki"],
    "multistep_rate": ["sr-enkf"],
    "radius_sweep": ["sample"],
    "property_checks": list(PROPERTY_CHECKS),
}
DEFAULT_FIELD = {
    "mean_rate": "error_mean",
    "cov_rate": "error_cov",
    "po_vs_sr": "error_mean",
    "loc_vs_sample": "error_cov",
    "eki_meanfield": "error_mean",
    "leki_vs_eki": "error_mean",
    "multistep_rate": "error_mean",
    "radius_sweep": "error_cov",
    "property_checks": "error_cov",
}
FORWARD_KINDS = ("random", "identity", "banded", "tanh")
CHECK_TYPES = ("slope", "win_rate", "median_order", "monotone", "dominance", "max_residual")
MEDIAN_CHECKS = ("slope", "median_order", "monotone", "dominance")
RECORD_FIELDS = (
    "experiment", "N", "seed", "method", "error_mean", "error_cov", "offset_norm", "radius", "r2", "r_inf",
)
FAILURE_TOLERANCE = 0.10
MIN_SEEDS_FOR_MEDIANS = 30

MASK64 = (1 << 64) - 1


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrialRecord:
    """One Monte Carlo trial of one method; optional scalars are NaN when not applicable"""
    experiment: str
    N: int
    seed: int
    method: str
    error_mean: float
    error_cov: float
    offset_norm: float = math.nan
    radius: float = math.nan
    r2: float = math.nan
    r_inf: float = math.nan

    def __post_init__(self):
        for name in ("error_mean", "error_cov"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise InvalidInputError(f"TrialRecord.{name} must be finite and >= 0, got {value}")

    def as_row(self) -> Dict[str, Any]:
        return asdict(self)

    def sort_key(self):
        return (self.experiment, self.method, self.N, self.seed, -math.inf if math.isnan(self.r2) else self.r2)


@dataclass(frozen=True)
class RateFit:
    """Least-squares line ln(error) = intercept + slope ln(N)"""
    slope: float
    intercept: float
    residual_std: float
    n_points: int
    slope_stderr: float = math.nan

    def ci(self, level: float = 0.95) -> Tuple[float, float]:
        """Two-sided t interval for the slope (NaN with fewer than 3 points)"""
        if self.n_points < 3:
            return (math.nan, math.nan)
        half = stats.t.ppf(0.5 + level / 2, self.n_points - 2) * self.slope_stderr
        return (self.slope - half, self.slope + half)

    def as_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["ci95"] = list(self.ci())
        return out


@dataclass(frozen=True)
class CheckResult:
    name: str
    kind: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class ExperimentSpec:
    """
    One preset: experiment kind, problem generator, N grid, seed count and the
    checks to evaluate on the resulting records.
    """
    id: str
    kind: str
    n_grid: List[int]
    seeds: int
    master_seed: int = 0
    d: Optional[int] = None
    k: Optional[int] = None
    covariances: List[CovarianceSpec] = field(default_factory=list)
    forward: Dict[str, Any] = field(default_factory=lambda: {"kind": "random"})
    noise_scale: float = 1.0
    methods: List[str] = field(default_factory=list)
    localization: Dict[str, Any] = field(default_factory=dict)
    params: Dict[str, Any] = field(default_factory=dict)
    checks: List[Dict[str, Any]] = field(default_factory=list)
    output: Optional[str] = None

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentSpec":
        """Build from a parsed config mapping, raising ConfigError with the offending field"""
        if not isinstance(data, dict):
            raise ConfigError("Experiment config must be a mapping", field="experiment")
        for key in ("id", "kind", "n_grid", "seeds"):
            if key not in data:
                raise ConfigError("Missing required configuration", field=f"experiment -> {key}")
        known = set(cls.__dataclass_fields__) | {"covariance"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown experiment fields: {unknown}", field="experiment")

        raw_covs = data.get("covariances")
        if raw_covs is None and "covariance" in data:
            raw_covs = [data["covariance"]]
        covariances = []
        for i, raw in enumerate(raw_covs or []):
            try:
                covariances.append(raw if isinstance(raw, CovarianceSpec) else CovarianceSpec.from_dict(dict(raw)))
            except (InvalidInputError, TypeError) as e:
                raise ConfigError(str(e), field=f"experiment -> covariances -> {i}") from e

        kwargs = {key: value for key, value in data.items() if key not in ("covariance", "covariances")}
        try:
            kwargs["n_grid"] = [int(n) for n in data["n_grid"]]
            kwargs["seeds"] = int(data["seeds"])
            kwargs["master_seed"] = int(data.get("master_seed", 0))
            for key in ("d", "k"):
                if data.get(key) is not None:
                    kwargs[key] = int(data[key])
            kwargs["noise_scale"] = float(data.get("noise_scale", 1.0))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Expected a number: {e}", field="experiment") from e
        return cls(covariances=covariances, **kwargs)

    def validate(self):
        if not self.id or not isinstance(self.id, str):
            raise ConfigError("Experiment id must be a non-empty string", field="experiment -> id")
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"Unknown experiment kind '{self.kind}', expected one of {EXPERIMENT_KINDS}",
                              field="experiment -> kind")
        if not self.n_grid or any(n < 2 for n in self.n_grid):
            raise ConfigError("n_grid must be non-empty with every N >= 2", field="experiment -> n_grid")
        if any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise ConfigError("n_grid must be strictly increasing", field="experiment -> n_grid")
        if self.seeds < 1:
            raise ConfigError("seeds must be >= 1", field="experiment -> seeds")
        if self.master_seed < 0:
            raise ConfigError("master_seed must be >= 0", field="experiment -> master_seed")
        if not self.noise_scale > 0:
            raise ConfigError("noise_scale must be > 0", field="experiment -> noise_scale")

        if not self.methods:
            self.methods = list(DEFAULT_METHODS[self.kind])
        bad = [m for m in self.methods if m not in ALLOWED_METHODS[self.kind]]
        if bad:
            raise ConfigError(f"Methods {bad} are not valid for kind '{self.kind}'", field="experiment -> methods")

        if self.kind != "property_checks":
            if not self.covariances:
                raise ConfigError("A prior covariance is required", field="experiment -> covariance")
            if self.d is None:
                self.d = self.covariances[0].d
        if self.d is None or self.d < 1:
            raise ConfigError("State dimension d must be >= 1", field="experiment -> d")
        if self.k is None:
            self.k = self.d
        if self.k < 1:
            raise ConfigError("Observation dimension k must be >= 1", field="experiment -> k")

        fkind = self.forward.get("kind", "random") if isinstance(self.forward, dict) else None
        if fkind not in FORWARD_KINDS:
            raise ConfigError(f"Unknown forward kind '{fkind}', expected one of {FORWARD_KINDS}",
                              field="experiment -> forward -> kind")
        if self.kind in ("eki_meanfield", "leki_vs_eki") and fkind != "tanh":
            logger.debug("EKI experiment %s uses the linear forward kind '%s'", self.id, fkind)

        loc = self.localization or {}
        if "radius" in loc and ("t" in loc or "c" in loc):
            raise ConfigError("Give either radius or (t, c)", field="experiment -> localization")
        if loc.get("source", "population") not in ("population", "sample"):
            raise ConfigError("source must be 'population' or 'sample'", field="experiment -> localization -> source")

        for i, check in enumerate(self.checks):
            ctype = check.get("type") if isinstance(check, dict) else None
            if ctype not in CHECK_TYPES:
                raise ConfigError(f"Unknown check type '{ctype}', expected one of {CHECK_TYPES}",
                                  field=f"experiment -> checks -> {i} -> type")
            if ctype in MEDIAN_CHECKS + ("win_rate",) and self.seeds < MIN_SEEDS_FOR_MEDIANS:
                raise ConfigError(f"Median-based checks need seeds >= {MIN_SEEDS_FOR_MEDIANS}",
                                  field="experiment -> seeds")

    @property
    def default_field(self) -> str:
        return DEFAULT_FIELD[self.kind]

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["covariances"] = [c.to_dict() for c in self.covariances]
        return out


# ---------------------------------------------------------------------------
# Seeds
# ---------------------------------------------------------------------------

def _splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def mix_seed(master_seed: int, experiment_id: str, i: int) -> int:
    """
    64-bit trial seed: splitmix64(splitmix64(master ^ h(id)) + i), where h is
    the little-endian blake2b-8 digest of the UTF-8 id.
    """
    h = int.from_bytes(hashlib.blake2b(experiment_id.encode("utf-8"), digest_size=8).digest(), "little")
    return _splitmix64((_splitmix64((int(master_seed) ^ h) & MASK64) + int(i)) & MASK64)


# ---------------------------------------------------------------------------
# Per-prior context
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class _Context:
    index: int
    prior: Optional[GaussianPrior] = None
    r2: float = math.nan
    r_inf: float = math.nan
    max_diag: float = math.nan
    problem: Any = None
    mu: Optional[np.ndarray] = None
    sigma: Optional[np.ndarray] = None
    extra: Dict[str, Any] = field(default_factory=dict)


def _forward_matrix(spec: ExperimentSpec, rng: np.random.Generator) -> np.ndarray:
    fwd = spec.forward
    kind = fwd.get("kind", "random")
    d, k = spec.d, spec.k
    if kind == "identity":
        return np.eye(k, d)
    if kind == "banded":
        return banded_matrix(k, d, int(fwd.get("bandwidth", 2)), float(fwd.get("value", 1.0)))
    return float(fwd.get("scale", 1.0)) * rng.standard_normal((k, d)) / np.sqrt(d)


def _build_context(spec: ExperimentSpec, j: int) -> _Context:
    cov_spec = spec.covariances[j]
    C = make_covariance(cov_spec)
    if C.shape[0] != spec.d:
        raise ConfigError(f"Covariance has dimension {C.shape[0]}, expected d={spec.d}",
                          field=f"experiment -> covariances -> {j}")
    prior = GaussianPrior(np.zeros(spec.d), C)
    dims = effective_dims(C)
    ctx = _Context(index=j, prior=prior, r2=dims.r2, r_inf=dims.r_inf, max_diag=dims.max_diag)
    rng = np.random.default_rng(mix_seed(spec.master_seed, f"{spec.id}/problem", j))
    gamma = spec.noise_scale * np.eye(spec.k)

    if spec.kind in ("eki_meanfield", "leki_vs_eki"):
        _build_eki_context(spec, ctx, rng, gamma)
    elif spec.kind == "multistep_rate":
        T = int(spec.params.get("T", 5))
        fp, _ = simulate_filter_problem(
            spec.d, spec.k, T, rng,
            spectral_radius=float(spec.params.get("spectral_radius", 0.9)),
            noise_scale=spec.noise_scale,
            prior=prior,
        )
        ctx.problem = fp
        trace = kalman_filter(fp)
        ctx.mu, ctx.sigma = trace.analysis_means[-1], trace.analysis_covs[-1]
    else:
        A = _forward_matrix(spec, rng)
        truth = prior.mean + sampling_factor(C) @ rng.standard_normal(spec.d)
        y = A @ truth + np.sqrt(spec.noise_scale) * rng.standard_normal(spec.k)
        ctx.problem = LinearProblem(A, gamma, y)
        ctx.mu, ctx.sigma = exact_posterior(prior.mean, C, ctx.problem)
    logger.info("Prepared prior %d of %s: r2=%.3f r_inf=%.3f", j, spec.id, ctx.r2, ctx.r_inf)
    return ctx


def _build_eki_context(spec: ExperimentSpec, ctx: _Context, rng: np.random.Generator, gamma: np.ndarray):
    fwd = spec.forward
    if fwd.get("kind") == "tanh":
        forward = tanh_fixture(spec.d, spec.k, float(fwd.get("coupling", 0.1)))
    else:
        forward = linear_map(_forward_matrix(spec, rng))
    prior = ctx.prior
    truth = prior.mean + sampling_factor(prior.cov) @ rng.standard_normal(spec.d)
    y = forward.evaluate(truth) + np.sqrt(spec.noise_scale) * rng.standard_normal(spec.k)
    prob = EkiProblem(forward, gamma, y, alpha=float(spec.params.get("alpha", 1.0)))

    N_ref = int(spec.params.get("N_ref", 200_000))
    pop = mean_field_reference(prior, forward, N_ref, mix_seed(spec.master_seed, f"{spec.id}/mean-field", ctx.index))
    u_fixed = sample_ensemble(prior, 2, mix_seed(spec.master_seed, f"{spec.id}/fixed-member", ctx.index)).members[0]
    eta_fixed = sample_noise(gamma, 2, mix_seed(spec.master_seed, f"{spec.id}/fixed-noise", ctx.index)).members[0]

    ctx.problem = prob
    ctx.extra.update(
        pop=pop,
        gain=nonlinear_gain(pop.C_up, pop.C_pp, gamma, prob.alpha),
        u_fixed=u_fixed,
        eta_fixed=eta_fixed,
        v_star=mean_field_update(u_fixed, eta_fixed, pop, prob),
    )
    pp = effective_dims(pop.C_pp)
    ctx.extra.update(pp_max_diag=pp.max_diag, pp_r_inf=pp.r_inf, pp_r2=pp.r2)


# ---------------------------------------------------------------------------
# Trials
# ---------------------------------------------------------------------------

def _rel(x, y) -> float:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    return float(np.linalg.norm(x - y) / max(1.0, np.linalg.norm(y)))


def _localization(spec: ExperimentSpec, ctx: _Context, N: int, c: Optional[float] = None) -> LocalizationConfig:
    loc = spec.localization or {}
    if "radius" in loc and c is None:
        return LocalizationConfig(radius=float(loc["radius"]))
    t = float(loc.get("t", 1.0))
    c = float(loc.get("c", 1.0)) if c is None else c
    if loc.get("source", "population") == "sample":
        return LocalizationConfig(t=t, c=c)
    rho = theorem_radius_cov(ctx.max_diag, ctx.r_inf, N, t=t, c=c, shift=float(loc.get("shift", 0.0)))
    return LocalizationConfig(radius=rho)


def _record(spec, ctx, N, i, method, error_mean, error_cov, **extra) -> TrialRecord:
    return TrialRecord(
        experiment=spec.id, N=int(N), seed=int(i), method=method,
        error_mean=float(error_mean), error_cov=float(error_cov),
        r2=ctx.r2, r_inf=ctx.r_inf, **{k: float(v) for k, v in extra.items()},
    )


def _trial_linear(spec: ExperimentSpec, ctx: _Context, N: int, i: int, seed: int) -> List[TrialRecord]:
    E = sample_ensemble(ctx.prior, N, seed)
    problem = ctx.problem
    noise_seed = mix_seed(seed, "perturbations", 0)
    C = ctx.prior.cov
    records = []
    for method in spec.methods:
        if method in ESTIMATOR_METHODS:
            C_hat = sample_cov(E)
            err_m = float(np.linalg.norm(E.mean - ctx.prior.mean))
            if method == "sample":
                records.append(_record(spec, ctx, N, i, method, err_m, operator_norm(C_hat - C)))
            else:
                rho = _localization(spec, ctx, N).resolve(C_hat, N)
                records.append(_record(spec, ctx, N, i, method, err_m,
                                       operator_norm(threshold(C_hat, rho) - C), radius=rho))
            continue

        if method == "po":
            result = po_update(E, problem, seed=noise_seed)
        elif method == "etkf":
            result = etkf_update(E, problem, symmetric=True)
        elif method == "eakf":
            result = eakf_update(E, problem)
        elif method == "loc-po":
            result = localized_po_update(E, problem, _localization(spec, ctx, N), seed=noise_seed)
        else:
            result = localized_sr_update(E, problem, _localization(spec, ctx, N))
        extra = {}
        if "offset_norm" in result.diagnostics:
            extra["offset_norm"] = result.diagnostics["offset_norm"]
        if "radius_used" in result.diagnostics:
            extra["radius"] = result.diagnostics["radius_used"]
        records.append(_record(
            spec, ctx, N, i, method,
            np.linalg.norm(result.mu_hat - ctx.mu),
            operator_norm(result.sigma_hat - ctx.sigma),
            **extra,
        ))
    return records


def _trial_radius_sweep(spec: ExperimentSpec, ctx: _Context, N: int, i: int, seed: int) -> List[TrialRecord]:
    E = sample_ensemble(ctx.prior, N, seed)
    C, C_hat = ctx.prior.cov, sample_cov(E)
    err_m = float(np.linalg.norm(E.mean - ctx.prior.mean))
    records = [_record(spec, ctx, N, i, "sample", err_m, operator_norm(C_hat - C))]
    for c in spec.params.get("c_values", [0.25, 0.5, 1.0, 2.0]):
        rho = _localization(spec, ctx, N, c=float(c)).resolve(C_hat, N)
        records.append(_record(spec, ctx, N, i, f"c={float(c):g}", err_m,
                               operator_norm(threshold(C_hat, rho) - C), radius=rho))
    return records


def _trial_eki_meanfield(spec: ExperimentSpec, ctx: _Context, N: int, i: int, seed: int) -> List[TrialRecord]:
    """Distance of the fixed member's EKI update to its mean-field update"""
    prob, x = ctx.problem, ctx.extra
    members = sample_ensemble(ctx.prior, N, seed).members.copy()
    members[0] = x["u_fixed"]
    H = sample_noise(prob.gamma, N, mix_seed(seed, "perturbations", 0)).members.copy()
    H[0] = x["eta_fixed"]
    E = Ensemble(members)
    records = []
    for method in spec.methods:
        if method == "eki":
            result = eki_update(E, prob, perturbations=H)
            radius = math.nan
        else:
            rho_up, rho_pp = _leki_radii(spec, ctx, N)
            result = leki_update(E, prob, rho_up, rho_pp, perturbations=H)
            radius = rho_up
        err = np.linalg.norm(result.ensemble.members[0] - x["v_star"])
        gain_err = operator_norm(result.diagnostics["gain"] - x["gain"])
        records.append(_record(spec, ctx, N, i, method, err, gain_err, radius=radius))
    return records


def _leki_radii(spec: ExperimentSpec, ctx: _Context, N: int) -> Tuple[float, float]:
    loc, x = spec.localization or {}, ctx.extra
    if "radius" in loc:
        rho = float(loc["radius"])
        return rho, float(loc.get("radius_pp", rho))
    t, c, shift = float(loc.get("t", 1.0)), float(loc.get("c", 1.0)), float(loc.get("shift", 0.0))
    rho_up = theorem_radius_cross(ctx.max_diag, x["pp_max_diag"], ctx.r_inf, x["pp_r_inf"], N, t=t, c=c, shift=shift)
    rho_pp = theorem_radius_pp(x["pp_max_diag"], x["pp_r_inf"], N, t=t, c=c, shift=shift)
    return rho_up, rho_pp


def _trial_leki_vs_eki(spec: ExperimentSpec, ctx: _Context, N: int, i: int, seed: int) -> List[TrialRecord]:
    """Member-averaged distance to the mean-field update under shared perturbations"""
    prob, x = ctx.problem, ctx.extra
    E = sample_ensemble(ctx.prior, N, seed)
    H = sample_noise(prob.gamma, N, mix_seed(seed, "perturbations", 0)).members
    V_star = E.members + (prob.y[None, :] - prob.forward.evaluate(E.members) - H) @ x["gain"].T
    records = []
    for method in spec.methods:
        if method == "eki":
            result, radius = eki_update(E, prob, perturbations=H), math.nan
        else:
            rho_up, rho_pp = _leki_radii(spec, ctx, N)
            result, radius = leki_update(E, prob, rho_up, rho_pp, perturbations=H), rho_up
        err = float(np.mean(np.linalg.norm(result.ensemble.members - V_star, axis=1)))
        gain_err = operator_norm(result.diagnostics["gain"] - x["gain"])
        records.append(_record(spec, ctx, N, i, method, err, gain_err, radius=radius))
    return records


def _trial_multistep(spec: ExperimentSpec, ctx: _Context, N: int, i: int, seed: int) -> List[TrialRecord]:
    trace = sr_enkf(ctx.problem, N, seed)
    return [_record(
        spec, ctx, N, i, "sr-enkf",
        np.linalg.norm(trace.analysis_means[-1] - ctx.mu),
        operator_norm(trace.analysis_covs[-1] - ctx.sigma),
    )]


def _property_residuals(check: str, spec: ExperimentSpec, N: int, seed: int) -> Tuple[float, float]:
    """(mean-side, covariance-side) relative residuals of one exactness property on a fresh instance"""
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, spec.d + 1))
    k = int(rng.integers(1, spec.k + 1))
    prior, problem = random_linear_problem(d, k, rng)
    E = sample_ensemble(prior, N, mix_seed(seed, "ensemble", 0))
    C_hat = sample_cov(E)

    if check == "posterior":
        mu, Sigma = exact_posterior(prior.mean, prior.cov, problem)
        return (_rel(mean_update(prior.mean, prior.cov, problem), mu),
                _rel(cov_update(prior.cov, problem.A, problem.gamma), Sigma))

    if check == "sr_consistency":
        target = cov_update(C_hat, problem.A, problem.gamma)
        et, ea = etkf_update(E, problem), eakf_update(E, problem)
        return (_rel(et.mu_hat, mean_update(E.mean, C_hat, problem)),
                max(_rel(et.sigma_hat, target), _rel(ea.sigma_hat, target), _rel(et.sigma_hat, ea.sigma_hat)))

    if check == "po_identity":
        H = sample_noise(problem.gamma, N, mix_seed(seed, "perturbations", 0)).members
        result = po_update(E, problem, perturbations=H)
        noise = Ensemble(H)
        target = cov_update(C_hat, problem.A, problem.gamma) + offset(
            C_hat, sample_cov(noise), sample_cross_cov(E, noise), problem)
        K = kalman_gain(C_hat, problem.A, problem.gamma)
        mean_target = mean_update(E.mean, C_hat, problem) - K @ noise.mean
        return (_rel(result.mu_hat, mean_target),
                max(_rel(result.sigma_hat, target), _rel(result.sigma_hat, po_covariance_expansion(E, H, problem))))

    if check == "positive_part":
        dims = effective_dims(prior.cov)
        rho = theorem_radius_cov(dims.max_diag, dims.r_inf, N, c=float(spec.params.get("c", 1.0)))
        B_rho = threshold(C_hat, rho)
        gap = operator_norm(positive_part(B_rho) - prior.cov) - 2.0 * operator_norm(B_rho - prior.cov)
        return 0.0, max(0.0, gap)

    if check == "eki_po":
        H = sample_noise(problem.gamma, N, mix_seed(seed, "perturbations", 0)).members
        po = po_update(E, problem, perturbations=H)
        eki = eki_update(E, EkiProblem(linear_map(problem.A), problem.gamma, problem.y), perturbations=H)
        return _rel(eki.ensemble.members, po.ensemble.members), _rel(eki.sigma_hat, po.sigma_hat)

    # sparsity propagation on a banded operator and an ar1 covariance
    q = float(spec.params.get("q", 0.5))
    A = banded_matrix(k, d, int(rng.integers(1, 4)), float(rng.uniform(0.5, 1.5)))
    C = make_covariance(CovarianceSpec(kind="ar1", d=d, phi=float(rng.uniform(0.2, 0.7))))
    prod_gap = linf_induced_norm(A @ C @ A.T) - three_product_sparsity_bound(A, C, q)
    stein_gap = linf_induced_norm(C @ A.T) - stein_cross_sparsity_bound(C, A, q)
    return max(0.0, stein_gap), max(0.0, prod_gap)


def _trial_property(spec: ExperimentSpec, ctx: _Context, N: int, i: int, seed: int) -> List[TrialRecord]:
    records = []
    for check in spec.methods:
        res_mean, res_cov = _property_residuals(check, spec, N, mix_seed(seed, check, 0))
        records.append(_record(spec, ctx, N, i, check, res_mean, res_cov))
    return records


TRIAL_RUNNERS: Dict[str, Callable] = {
    "mean_rate": _trial_linear,
    "cov_rate": _trial_linear,
    "po_vs_sr": _trial_linear,
    "loc_vs_sample": _trial_linear,
    "radius_sweep": _trial_radius_sweep,
    "eki_meanfield": _trial_eki_meanfield,
    "leki_vs_eki": _trial_leki_vs_eki,
    "multistep_rate": _trial_multistep,
    "property_checks": _trial_property,
}


def _safe_trial(runner, spec, ctx, N, i) -> Optional[List[TrialRecord]]:
    seed = mix_seed(spec.master_seed, spec.id, i)
    try:
        return runner(spec, ctx, N, i, seed)
    except (EnkfLabError, np.linalg.LinAlgError, FloatingPointError) as e:
        logger.warning("Trial %s N=%d seed=%d failed: %s", spec.id, N, i, e)
        return None


def run_experiment(spec: ExperimentSpec, threads: int = 1) -> List[TrialRecord]:
    """Run every (prior, N, trial) cell and return canonically sorted records"""
    records, _ = run_experiment_counted(spec, threads=threads)
    return records


def run_experiment_counted(spec: ExperimentSpec, threads: int = 1) -> Tuple[List[TrialRecord], int]:
    """
    Like run_experiment, also returning the number of failed trials.

    Raises:
        ExperimentError: if more than 10% of the trials fail
    """
    if threads < 1:
        raise InvalidInputError(f"threads must be >= 1, got {threads}")
    if spec.kind == "property_checks":
        contexts = [_Context(index=0)]
    else:
        contexts = [_build_context(spec, j) for j in range(len(spec.covariances))]
    runner = TRIAL_RUNNERS[spec.kind]

    tasks = [(ctx, N, i) for ctx in contexts for N in spec.n_grid for i in range(spec.seeds)]
    logger.info("Running %s (%s): %d trials on %d thread(s)", spec.id, spec.kind, len(tasks), threads)
    results = Parallel(n_jobs=threads, prefer="threads")(
        delayed(_safe_trial)(runner, spec, ctx, N, i) for ctx, N, i in tasks
    )

    failed = sum(1 for r in results if r is None)
    if failed > FAILURE_TOLERANCE * len(tasks):
        raise ExperimentError(f"{failed} of {len(tasks)} trials failed in {spec.id}")
    if failed:
        logger.warning("%d of %d trials failed in %s", failed, len(tasks), spec.id)
    records = [rec for r in results if r is not None for rec in r]
    records.sort(key=TrialRecord.sort_key)
    return records, failed


# ---------------------------------------------------------------------------
# Analysis
# ---------------------------------------------------------------------------

def fit_rate(points: Iterable[Tuple[float, float]]) -> RateFit:
    """Least-squares fit of ln(error) on ln(N)"""
    pts = [(float(n), float(e)) for n, e in points]
    if len(pts) < 2:
        raise InvalidInputError(f"fit_rate needs at least 2 points, got {len(pts)}")
    if any(n <= 0 or e <= 0 or not math.isfinite(e) for n, e in pts):
        raise InvalidInputError("fit_rate needs positive N and error values")
    x = np.log([n for n, _ in pts])
    y = np.log([e for _, e in pts])
    if np.ptp(x) == 0:
        raise InvalidInputError("fit_rate needs at least two distinct N values")
    fit = stats.linregress(x, y)
    resid = y - (fit.intercept + fit.slope * x)
    n = len(pts)
    residual_std = float(np.sqrt(np.sum(resid ** 2) / (n - 2))) if n > 2 else 0.0
    return RateFit(
        slope=float(fit.slope),
        intercept=float(fit.intercept),
        residual_std=residual_std,
        n_points=n,
        slope_stderr=float(fit.stderr) if n > 2 else math.nan,
    )


def _select(records: Sequence[TrialRecord], method: str, r2: Optional[float] = None, N: Optional[int] = None):
    out = [r for r in records if r.method == method]
    if r2 is not None:
        out = [r for r in out if math.isclose(r.r2, r2, rel_tol=1e-9)]
    if N is not None:
        out = [r for r in out if r.N == N]
    return out


def median_by_n(records: Sequence[TrialRecord], method: str, fld: str, r2: Optional[float] = None) -> List[Tuple[int, float]]:
    """(N, median of fld) for one method, increasing in N"""
    by_n: Dict[int, List[float]] = {}
    for r in _select(records, method, r2=r2):
        by_n.setdefault(r.N, []).append(getattr(r, fld))
    return [(n, float(np.median(v))) for n, v in sorted(by_n.items())]


def theorem_bound_curve(
    kind: str,
    constants: Dict[str, float],
    C,
    n_grid: Sequence[int],
    gamma=None,
) -> List[Tuple[int, float]]:
    """
    Right-hand sides of the finite-ensemble bounds at each N.

    kind is one of
      mean          c1 (sqrt(x) v x^{3/2}) + phi c2 (sqrt(g) v x sqrt(g))
      cov           c1 (sqrt(x) v x^2) + phi c2 (sqrt(x) v x^3 v (sqrt(g) v g)(1 v x^2))
      sample_cov    c1 |C| (sqrt(x) v x)
      localized_cov c1 R_q rho_N^{1-q}
      eki           c1 (c2/N v sqrt(x) v x v sqrt(p) v p v sqrt(t/N) v t/N)
    with x = r2(C)/N, g = r2(Gamma)/N and p = r2(C_pp)/N.
    """
    c1 = float(constants.get("c1", 1.0))
    c2 = float(constants.get("c2", 1.0))
    phi = float(constants.get("phi", 0.0))
    if not c1 > 0 or c2 < 0 or not 0.0 <= phi <= 1.0:
        raise InvalidInputError(f"Invalid bound constants c1={c1}, c2={c2}, phi={phi}")
    dims = effective_dims(C)
    r2 = dims.r2
    r2_gamma = constants.get("r2_gamma")
    if phi > 0 and r2_gamma is None:
        if gamma is None:
            raise InvalidInputError("phi > 0 needs Gamma or constants['r2_gamma']")
        r2_gamma = effective_dims(gamma).r2

    curve = []
    for N in n_grid:
        if N < 1:
            raise InvalidInputError(f"N must be >= 1, got {N}")
        x = r2 / N
        if kind == "mean":
            value = c1 * max(math.sqrt(x), x ** 1.5)
            if phi > 0:
                g = r2_gamma / N
                value += phi * c2 * max(math.sqrt(g), x * math.sqrt(g))
        elif kind == "cov":
            value = c1 * max(math.sqrt(x), x ** 2)
            if phi > 0:
                g = r2_gamma / N
                value += phi * c2 * max(math.sqrt(x), x ** 3, max(math.sqrt(g), g) * max(1.0, x ** 2))
        elif kind == "sample_cov":
            value = c1 * dims.op_norm * max(math.sqrt(x), x)
        elif kind == "localized_cov":
            q = float(constants.get("q", 0.0))
            R_q = float(constants.get("R_q", row_lq_norm(C, q)))
            rho = theorem_radius_cov(dims.max_diag, dims.r_inf, N,
                                     t=float(constants.get("t", 1.0)), c=float(constants.get("c", 1.0)))
            value = c1 * R_q * rho ** (1.0 - q)
        elif kind == "eki":
            p = float(constants.get("r2_pp", r2)) / N
            t = float(constants.get("t", 1.0))
            value = c1 * max(c2 / N, math.sqrt(x), x, math.sqrt(p), p, math.sqrt(t / N), t / N)
        else:
            raise InvalidInputError(f"Unknown bound kind '{kind}'")
        curve.append((int(N), float(value)))
    return curve


def compare_win_rate(records_a: Sequence[TrialRecord], records_b: Sequence[TrialRecord], fld: str = "error_mean") -> float:
    """Fraction of (N, seed) pairs where A's error is below B's; ties count one half"""
    def keyed(records):
        out = {}
        for r in records:
            key = (r.N, r.seed, None if math.isnan(r.r2) else round(r.r2, 9))
            if key in out:
                raise InvalidInputError(f"Duplicate record for N={r.N}, seed={r.seed}")
            out[key] = getattr(r, fld)
        return out

    a, b = keyed(records_a), keyed(records_b)
    if not a or set(a) != set(b):
        raise InvalidInputError("Records are not paired by (N, seed)")
    score = sum(1.0 if a[key] < b[key] else 0.5 if a[key] == b[key] else 0.0 for key in a)
    return score / len(a)


def _r2_values(records: Sequence[TrialRecord], method: str) -> List[float]:
    return sorted({r.r2 for r in records if r.method == method and not math.isnan(r.r2)})


def evaluate_checks(records: Sequence[TrialRecord], spec: ExperimentSpec) -> List[CheckResult]:
    """Evaluate the checks declared in the preset against the records"""
    results = []
    for i, check in enumerate(spec.checks):
        ctype = check["type"]
        name = check.get("name", f"{spec.id}:{ctype}:{i}")
        fld = check.get("field", spec.default_field)
        try:
            results.append(_evaluate_check(ctype, name, fld, check, records, spec))
        except InvalidInputError as e:
            results.append(CheckResult(name, ctype, False, math.nan, math.nan, str(e)))
    return results


def _evaluate_check(ctype, name, fld, check, records, spec) -> CheckResult:
    r2 = check.get("r2")
    if ctype == "slope":
        method = check.get("method", spec.methods[0])
        pts = median_by_n(records, method, fld, r2=r2)
        if len(pts) < 3:
            return CheckResult(name, ctype, False, math.nan, float(check.get("tol", 0.15)),
                               f"slope checks need >= 3 N values, got {len(pts)}")
        fit = fit_rate(pts)
        target, tol = float(check.get("target", -0.5)), float(check.get("tol", 0.15))
        return CheckResult(name, ctype, abs(fit.slope - target) <= tol, fit.slope, tol,
                           f"{method} {fld} slope {fit.slope:.3f} vs {target} +/- {tol}")

    if ctype == "win_rate":
        a, b = check["a"], check["b"]
        rate = compare_win_rate(_select(records, a, r2=r2), _select(records, b, r2=r2), fld)
        minimum = float(check.get("min", 0.5))
        return CheckResult(name, ctype, rate >= minimum, rate, minimum, f"{a} beats {b} on {fld}")

    if ctype == "median_order":
        a, b = check["a"], check["b"]
        N = check.get("N")
        med_a = float(np.median([getattr(r, fld) for r in _select(records, a, r2=r2, N=N)]))
        med_b = float(np.median([getattr(r, fld) for r in _select(records, b, r2=r2, N=N)]))
        return CheckResult(name, ctype, med_a < med_b, med_a, med_b, f"median {a} < median {b} on {fld}")

    if ctype == "monotone":
        method = check.get("method", spec.methods[0])
        N = check.get("N")
        meds = []
        for value in _r2_values(records, method):
            sel = [getattr(r, fld) for r in _select(records, method, r2=value, N=N)]
            meds.append((value, float(np.median(sel))))
        if len(meds) < 2:
            raise InvalidInputError("monotone checks need at least two priors")
        increasing = all(b[1] > a[1] for a, b in zip(meds, meds[1:]))
        detail = ", ".join(f"r2={v:.3g}: {m:.4g}" for v, m in meds)
        return CheckResult(name, ctype, increasing, meds[-1][1], meds[0][1], detail)

    if ctype == "dominance":
        method = check.get("method", spec.methods[0])
        pts = median_by_n(records, method, fld, r2=r2)
        if len(pts) < 2:
            raise InvalidInputError("dominance checks need at least two N values")
        j = int(check.get("covariance", 0))
        C = make_covariance(spec.covariances[j])
        curve = dict(theorem_bound_curve(check.get("curve", "mean"), check.get("constants", {}),
                                         C, [n for n, _ in pts]))
        n0, e0 = pts[0]
        scale = e0 / curve[n0]
        slack = float(check.get("slack", 1.0))
        ratios = [e / (scale * curve[n]) for n, e in pts[1:]]
        worst = max(ratios)
        return CheckResult(name, ctype, worst <= slack, worst, slack,
                           f"calibrated at N={n0}, worst median/bound ratio {worst:.3f}")

    method = check.get("method", spec.methods[0])
    values = [getattr(r, fld) for r in _select(records, method)]
    if not values:
        raise InvalidInputError(f"No records for method '{method}'")
    worst = max(values)
    maximum = float(check.get("max", 1e-9))
    return CheckResult(name, ctype, worst <= maximum, worst, maximum, f"max {method} {fld} residual")


def summarize(records: Sequence[TrialRecord], spec: ExperimentSpec, failed: int = 0) -> Dict[str, Any]:
    """Summary with per-method medians, rate fits, pairwise win rates and check results"""
    methods = sorted({r.method for r in records}, key=lambda m: (m not in spec.methods, m))
    fld = spec.default_field
    summary: Dict[str, Any] = {
        "experiment": spec.id,
        "kind": spec.kind,
        "master_seed": spec.master_seed,
        "n_records": len(records),
        "failed_trials": failed,
        "field": fld,
        "medians": {},
        "rate_fits": {},
        "win_rates": {},
    }
    for method in methods:
        for r2 in _r2_values(records, method) or [None]:
            label = method if r2 is None or len(_r2_values(records, method)) == 1 else f"{method}@r2={r2:.3g}"
            pts = median_by_n(records, method, fld, r2=r2)
            summary["medians"][label] = {str(n): e for n, e in pts}
            if len(pts) >= 2 and all(e > 0 for _, e in pts):
                summary["rate_fits"][label] = fit_rate(pts).as_dict()
    for i, a in enumerate(methods):
        for b in methods[i + 1:]:
            try:
                summary["win_rates"][f"{a}_vs_{b}"] = compare_win_rate(_select(records, a), _select(records, b), fld)
            except InvalidInputError:
                continue
    if summary["win_rates"]:
        summary["win_rate"] = next(iter(summary["win_rates"].values()))
    checks = evaluate_checks(records, spec)
    summary["checks"] = [c.as_dict() for c in checks]
    summary["passed"] = all(c.passed for c in checks)
    return summary
