#!/usr/bin/env python3
"""
Tests for experiments.py
"""

import math
import pytest
import sys
import os

import numpy as np

# Add parent directory to path
ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, ROOT)

from enkf_lab import experiments
from enkf_lab.config_loader import load_config
from enkf_lab.exceptions import ConfigError, ExperimentError, InvalidInputError, NumericError
from enkf_lab.experiments import (
    ExperimentSpec,
    TrialRecord,
    compare_win_rate,
    evaluate_checks,
    fit_rate,
    median_by_n,
    mix_seed,
    run_experiment,
    run_experiment_counted,
    summarize,
    theorem_bound_curve,
)
from enkf_lab.models import CovarianceSpec, make_covariance

CONFIGS = os.path.join(ROOT, "configs")


def small_spec(**overrides):
    data = {
        "id": "small",
        "kind": "mean_rate",
        "n_grid": [10, 40],
        "seeds": 3,
        "master_seed": 1,
        "covariance": {"kind": "spectrum-decay", "d": 5, "r2": 2.0},
        "k": 3,
        "methods": ["etkf", "po"],
    }
    data.update(overrides)
    return ExperimentSpec.from_dict(data)


def power_law_records(method="etkf", exponent=-0.5, seeds=30, n_grid=(50, 200, 800)):
    records = []
    for N in n_grid:
        for i in range(seeds):
            value = N ** exponent * (1.0 + 0.01 * (i - seeds / 2) / seeds)
            records.append(TrialRecord("synthetic", N, i, method, value, value))
    return records


class TestSeeds:
    """Test trial seed derivation"""

    def test_deterministic(self):
        assert mix_seed(7, "exp", 3) == mix_seed(7, "exp", 3)

    def test_distinct_inputs_give_distinct_seeds(self):
        seeds = {mix_seed(7, "exp", i) for i in range(100)}
        seeds |= {mix_seed(8, "exp", 0), mix_seed(7, "other", 0)}
        assert len(seeds) == 102

    def test_64_bit_range(self):
        s = mix_seed(2 ** 63, "x", 5)
        assert 0 <= s < 2 ** 64


class TestExperimentSpec:
    """Test preset parsing and validation"""

    def test_defaults(self):
        spec = ExperimentSpec.from_dict({
            "id": "x", "kind": "po_vs_sr", "n_grid": [20], "seeds": 2,
            "covariance": {"kind": "identity", "d": 4},
        })
        assert spec.methods == ["etkf", "po"]
        assert spec.d == 4 and spec.k == 4
        assert spec.default_field == "error_mean"

    def test_missing_field(self):
        with pytest.raises(ConfigError) as exc:
            ExperimentSpec.from_dict({"kind": "mean_rate", "n_grid": [10], "seeds": 1})
        assert exc.value.field == "experiment -> id"

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            small_spec(kind="mystery")

    def test_n_grid_must_increase(self):
        with pytest.raises(ConfigError):
            small_spec(n_grid=[40, 10])

    def test_n_at_least_two(self):
        with pytest.raises(ConfigError):
            small_spec(n_grid=[1, 10])

    def test_method_must_fit_kind(self):
        with pytest.raises(ConfigError):
            small_spec(methods=["eki"])

    def test_median_checks_need_enough_seeds(self):
        with pytest.raises(ConfigError):
            small_spec(checks=[{"type": "slope"}])

    def test_unknown_check_type(self):
        with pytest.raises(ConfigError):
            small_spec(checks=[{"type": "vibes"}])

    def test_unknown_field(self):
        with pytest.raises(ConfigError):
            small_spec(colour="blue")

    def test_radius_and_rule_exclusive(self):
        with pytest.raises(ConfigError):
            small_spec(localization={"radius": 0.1, "t": 1.0})

    def test_to_dict_round_trip(self):
        spec = small_spec()
        again = ExperimentSpec.from_dict(spec.to_dict())
        assert again.to_dict() == spec.to_dict()


class TestRecords:
    """Test the record type"""

    def test_negative_error_rejected(self):
        with pytest.raises(InvalidInputError):
            TrialRecord("x", 10, 0, "etkf", -1.0, 0.0)

    def test_nan_error_rejected(self):
        with pytest.raises(InvalidInputError):
            TrialRecord("x", 10, 0, "etkf", 0.0, math.nan)

    def test_optional_fields_default_nan(self):
        r = TrialRecord("x", 10, 0, "etkf", 1.0, 1.0)
        assert math.isnan(r.offset_norm) and math.isnan(r.radius)


class TestAnalysis:
    """Test rate fits, win rates, bound curves and checks"""

    def test_fit_exact_power_law(self):
        fit = fit_rate([(n, 3.0 * n ** -0.5) for n in (10, 100, 1000)])
        assert fit.slope == pytest.approx(-0.5)
        assert fit.intercept == pytest.approx(math.log(3.0))
        assert fit.residual_std == pytest.approx(0.0, abs=1e-12)

    def test_fit_two_points(self):
        fit = fit_rate([(10, 1.0), (1000, 0.1)])
        assert fit.slope == pytest.approx(-0.5)
        assert math.isnan(fit.ci()[0])

    def test_fit_needs_two_points(self):
        with pytest.raises(InvalidInputError):
            fit_rate([(10, 1.0)])

    def test_fit_needs_positive_errors(self):
        with pytest.raises(InvalidInputError):
            fit_rate([(10, 1.0), (20, 0.0)])

    def test_fit_needs_distinct_n(self):
        with pytest.raises(InvalidInputError):
            fit_rate([(10, 1.0), (10, 2.0)])

    def test_median_by_n(self):
        records = power_law_records(seeds=5)
        pts = median_by_n(records, "etkf", "error_mean")
        assert [n for n, _ in pts] == [50, 200, 800]

    def test_win_rate_counts_ties_as_half(self):
        a = [TrialRecord("x", 10, i, "a", v, 0.0) for i, v in enumerate([1.0, 2.0, 3.0, 4.0])]
        b = [TrialRecord("x", 10, i, "b", v, 0.0) for i, v in enumerate([2.0, 2.0, 1.0, 5.0])]
        assert compare_win_rate(a, b) == pytest.approx((1 + 0.5 + 0 + 1) / 4)

    def test_win_rate_needs_pairs(self):
        a = [TrialRecord("x", 10, 0, "a", 1.0, 0.0)]
        b = [TrialRecord("x", 10, 1, "b", 1.0, 0.0)]
        with pytest.raises(InvalidInputError):
            compare_win_rate(a, b)

    def test_bound_curves_decay(self):
        C = make_covariance(CovarianceSpec(kind="spectrum-decay", d=20, r2=4.0))
        for kind in ("mean", "cov", "sample_cov", "localized_cov", "eki"):
            curve = theorem_bound_curve(kind, {"c1": 1.0}, C, [10, 100, 1000])
            values = [v for _, v in curve]
            assert values[0] > values[1] > values[2], kind

    def test_bound_curve_large_n_slope(self):
        C = make_covariance(CovarianceSpec(kind="spectrum-decay", d=20, r2=4.0))
        curve = theorem_bound_curve("mean", {}, C, [1000, 100000])
        assert fit_rate(curve).slope == pytest.approx(-0.5)

    def test_bound_curve_noise_term_needs_gamma(self):
        with pytest.raises(InvalidInputError):
            theorem_bound_curve("mean", {"phi": 1.0}, np.eye(3), [10])

    def test_unknown_bound_kind(self):
        with pytest.raises(InvalidInputError):
            theorem_bound_curve("variance", {}, np.eye(3), [10])

    def test_slope_check_passes_on_power_law(self):
        spec = small_spec(seeds=30, checks=[{"type": "slope", "method": "etkf"}])
        results = evaluate_checks(power_law_records(), spec)
        assert results[0].passed
        assert results[0].value == pytest.approx(-0.5, abs=0.01)

    def test_slope_check_fails_on_wrong_rate(self):
        spec = small_spec(seeds=30, checks=[{"type": "slope", "method": "etkf"}])
        results = evaluate_checks(power_law_records(exponent=-1.0), spec)
        assert not results[0].passed

    def test_slope_check_needs_three_points(self):
        spec = small_spec(seeds=30, checks=[{"type": "slope", "method": "etkf"}])
        results = evaluate_checks(power_law_records(n_grid=(50, 200)), spec)
        assert not results[0].passed

    def test_win_rate_check(self):
        records = power_law_records("etkf") + power_law_records("po", exponent=-0.4)
        spec = small_spec(seeds=30, checks=[{"type": "win_rate", "a": "etkf", "b": "po", "min": 0.9}])
        assert evaluate_checks(records, spec)[0].passed

    def test_dominance_check_passes_when_error_decays_faster(self):
        spec = small_spec(seeds=30, checks=[{"type": "dominance", "method": "etkf", "curve": "mean"}])
        result = evaluate_checks(power_law_records(exponent=-0.6), spec)[0]
        assert result.passed
        assert result.value < 1.0

    def test_dominance_check_has_no_default_slack(self):
        """A median above the calibrated bound fails even by a few percent"""
        spec = small_spec(seeds=30, checks=[{"type": "dominance", "method": "etkf", "curve": "mean"}])
        result = evaluate_checks(power_law_records(exponent=-0.45), spec)[0]
        assert not result.passed
        assert result.threshold == 1.0
        assert result.value == pytest.approx(16 ** 0.05)

    def test_dominance_check_explicit_slack(self):
        spec = small_spec(seeds=30, checks=[{"type": "dominance", "method": "etkf", "curve": "mean", "slack": 1.2}])
        assert evaluate_checks(power_law_records(exponent=-0.45), spec)[0].passed

    def test_max_residual_check(self):
        records = [TrialRecord("x", 10, i, "posterior", 1e-14, 1e-13) for i in range(3)]
        spec = ExperimentSpec.from_dict({
            "id": "x", "kind": "property_checks", "n_grid": [10], "seeds": 3, "d": 4,
            "methods": ["posterior"],
            "checks": [{"type": "max_residual", "method": "posterior", "max": 1e-9}],
        })
        assert evaluate_checks(records, spec)[0].passed


class TestRunExperiment:
    """Test the Monte Carlo driver on small instances"""

    def test_record_count_and_order(self):
        spec = small_spec()
        records = run_experiment(spec)
        assert len(records) == 2 * 3 * 2
        assert records == sorted(records, key=TrialRecord.sort_key)
        assert {r.method for r in records} == {"etkf", "po"}
        assert all(not math.isnan(r.offset_norm) for r in records if r.method == "po")

    def test_thread_count_does_not_change_records(self):
        spec = small_spec()
        assert run_experiment(spec, threads=1) == run_experiment(spec, threads=3)

    def test_master_seed_changes_records(self):
        a = run_experiment(small_spec())
        b = run_experiment(small_spec(master_seed=2))
        assert [r.error_mean for r in a] != [r.error_mean for r in b]

    def test_property_checks_are_exact(self):
        spec = ExperimentSpec.from_dict({
            "id": "props", "kind": "property_checks", "n_grid": [8], "seeds": 3, "d": 6, "k": 4,
        })
        records = run_experiment(spec)
        assert len(records) == 3 * 6
        for r in records:
            assert r.error_mean < 1e-8 and r.error_cov < 1e-8, r.method

    def test_multistep_runs(self):
        spec = small_spec(kind="multistep_rate", methods=[], params={"T": 2})
        records = run_experiment(spec)
        assert {r.method for r in records} == {"sr-enkf"}

    def test_radius_sweep_methods(self):
        spec = small_spec(
            kind="radius_sweep", methods=[], covariance={"kind": "ar1", "d": 20, "phi": 0.5},
            params={"c_values": [0.5, 1.0]},
        )
        methods = {r.method for r in run_experiment(spec)}
        assert methods == {"sample", "c=0.5", "c=1"}

    def test_eki_meanfield_runs(self):
        spec = small_spec(
            kind="eki_meanfield", methods=["eki", "leki"], forward={"kind": "tanh"},
            params={"N_ref": 2000}, localization={"radius": 0.05},
        )
        records = run_experiment(spec)
        assert len(records) == 2 * 3 * 2

    def test_too_many_failures(self, monkeypatch):
        def failing(spec, ctx, N, i, seed):
            raise NumericError("boom")
        monkeypatch.setitem(experiments.TRIAL_RUNNERS, "mean_rate", failing)
        with pytest.raises(ExperimentError):
            run_experiment(small_spec())

    def test_few_failures_are_counted(self, monkeypatch):
        original = experiments.TRIAL_RUNNERS["mean_rate"]

        def flaky(spec, ctx, N, i, seed):
            if N == 40 and i == 0:
                raise NumericError("boom")
            return original(spec, ctx, N, i, seed)
        monkeypatch.setitem(experiments.TRIAL_RUNNERS, "mean_rate", flaky)
        spec = small_spec(seeds=10)
        records, failed = run_experiment_counted(spec)
        assert failed == 1
        assert len(records) == (2 * 10 - 1) * 2

    def test_summary(self):
        spec = small_spec()
        summary = summarize(run_experiment(spec), spec)
        assert summary["experiment"] == "small"
        assert set(summary["medians"]) == {"etkf", "po"}
        assert "etkf_vs_po" in summary["win_rates"]
        assert summary["checks"] == []

    @pytest.mark.slow
    def test_mean_rate_slope(self):
        spec = ExperimentSpec.from_dict({
            "id": "slope", "kind": "mean_rate", "n_grid": [50, 200, 800], "seeds": 40,
            "covariance": {"kind": "spectrum-decay", "d": 10, "r2": 4.0},
            "methods": ["etkf"],
            "checks": [{"type": "slope", "method": "etkf", "target": -0.5, "tol": 0.15}],
        })
        summary = summarize(run_experiment(spec, threads=2), spec)
        assert summary["checks"][0]["passed"], summary["checks"][0]["detail"]

    @pytest.mark.slow
    @pytest.mark.parametrize("name", [
        "loc_vs_sample.yaml",
        "mean_rate_sr.yaml",
        "cov_rate_sr.yaml",
        "multistep_rate.yaml",
        "property_checks.yaml",
    ])
    def test_shipped_preset_passes(self, name):
        """Every check of the shipped preset passes at its configured seed count"""
        spec = load_config(os.path.join(CONFIGS, name)).experiment_spec()
        summary = summarize(run_experiment(spec, threads=2), spec)
        assert summary["checks"]
        failed = [c for c in summary["checks"] if not c["passed"]]
        assert not failed, "; ".join(f"{c['name']}: {c['value']} vs {c['threshold']} ({c['detail']})" for c in failed)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
