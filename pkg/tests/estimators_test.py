# tests/estimators_test.py
import math

import numpy as np
import pytest

from app.core.errors import EmptyMatch, InvalidParameter, TooFewModels, TooFewRecords
from app.services.datagen import Dataset, generate_dataset
from app.services.design import Term
from app.services.estimators import (
    EfficiencyInputs,
    EstimateRecord,
    ModelSpec,
    aggregate,
    cherry_pick_diagnostic,
    cherry_pick_sweep,
    enumerate_models,
    estimate,
    model_dependence_summary,
    patt_from_interaction,
    patt_record,
    random_covariate_subsets,
    records_frame,
    relative_efficiency,
    summarize_estimates,
    verify_matched_consistency,
)
from app.services.match_result import MatchResult


@pytest.fixture
def paired_dataset():
    X = np.array([[0.0], [1.0], [0.1], [0.9]])
    W = np.array([1, 1, 0, 0])
    Y = np.array([3.0, 5.0, 1.0, 3.0])
    match = MatchResult(W, np.array([[0, 2], [1, 3]]), np.ones(4), "PSM")
    return Dataset(X, W, Y), match


class TestEstimate:
    def test_difference_in_means(self, paired_dataset):
        data, match = paired_dataset
        record = estimate(match, data, ModelSpec.unadjusted())
        assert record.point_estimate == pytest.approx(2.0)
        assert record.estimator_label == "unadjusted"
        assert record.design_label == "PSM"

    def test_noiseless_linear_recovers_effect(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(50, 2))
        W = (rng.random(50) < 0.4).astype(int)
        Y = 1.0 + 3.0 * W + X @ np.array([0.5, -2.0])
        data = Dataset(X, W, Y)
        record = estimate(MatchResult.unmatched(W), data, ModelSpec.linear(2))
        assert record.point_estimate == pytest.approx(3.0)
        assert record.beta1_hat == record.point_estimate

    def test_interaction_reports_theta(self, hetero_config):
        data = generate_dataset(hetero_config, 0)
        model = ModelSpec.for_scenario(hetero_config, "patt-matched")
        record = estimate(MatchResult.unmatched(data.W), data, model, replication_index=0)
        assert model.interaction_columns == (0,)
        assert len(record.theta_hat) == 1
        assert record.theta_hat[0] == pytest.approx(1.5, abs=0.5)
        assert record.replication_index == 0

    def test_empty_match(self, small_dataset):
        with pytest.raises(EmptyMatch):
            estimate(MatchResult.empty(small_dataset.W, "PSM"), small_dataset, ModelSpec.unadjusted())

    def test_unknown_estimator(self, linear_config):
        with pytest.raises(InvalidParameter):
            ModelSpec.for_scenario(linear_config, "quadratic")


class TestPatt:
    @pytest.fixture
    def record(self):
        return EstimateRecord("interaction", "Unmatched", 0.5, 0.5, theta_hat=(0.3,), interaction_columns=(0,))

    def test_treated_mean_of_modifier(self, record):
        X = np.array([[1.0], [1.4], [0.0], [5.0]])
        W = np.array([1, 1, 0, 0])
        data = Dataset(X, W, np.zeros(4))
        value = patt_from_interaction(record, "unmatched_treated", data, MatchResult.unmatched(W))
        assert value == pytest.approx(0.86)

    def test_matched_treated_mean(self, record):
        X = np.array([[1.0], [3.0], [0.9], [5.0]])
        W = np.array([1, 1, 0, 0])
        data = Dataset(X, W, np.zeros(4))
        match = MatchResult(W, np.array([[0, 2]]), np.array([1.0, 0.0, 1.0, 0.0]), "PSM")
        assert patt_from_interaction(record, "matched_treated", data, match) == pytest.approx(0.8)
        assert patt_from_interaction(record, "unmatched_treated", data, match) == pytest.approx(1.1)

    def test_no_modifiers(self):
        record = EstimateRecord("linear", "PSM", 2.0, 2.0)
        data = Dataset(np.zeros((2, 1)), np.array([1, 0]), np.zeros(2))
        assert patt_from_interaction(record, "matched_treated", data, MatchResult.unmatched(data.W)) == 2.0

    def test_record_relabelled(self, record):
        data = Dataset(np.array([[1.2], [1.2], [0.0]]), np.array([1, 1, 0]), np.zeros(3))
        relabelled = patt_record(record, "patt-source", data, MatchResult.unmatched(data.W))
        assert relabelled.estimator_label == "patt-source"
        assert relabelled.point_estimate == pytest.approx(0.86)
        assert relabelled.beta1_hat == 0.5

    def test_rejects_non_patt_estimator(self, record, small_dataset):
        with pytest.raises(InvalidParameter):
            patt_record(record, "linear", small_dataset, MatchResult.unmatched(small_dataset.W))


class TestModelDependence:
    def test_diagnostic(self):
        assert cherry_pick_diagnostic([1.0, 2.0, 3.0]) == pytest.approx((1.0, 3.0))

    def test_diagnostic_needs_two(self):
        with pytest.raises(TooFewModels):
            cherry_pick_diagnostic([1.0])

    def test_two_covariates_give_512_models(self):
        models = enumerate_models(2)
        assert len(models) == 512
        assert models[0].label == "unadjusted"
        assert len({m.covariate_terms for m in models}) == 512

    def test_limit(self):
        assert len(enumerate_models(5, limit=40)) == 40

    def test_sweep(self, linear_config):
        data = generate_dataset(linear_config, 0)
        result = cherry_pick_sweep(MatchResult.unmatched(data.W), data, enumerate_models(2, limit=20))
        assert result.estimates.size + result.failure_count == 20
        assert result.max_estimate == result.estimates.max()
        assert result.variance >= 0

    def test_correct_model_for_linear_surface(self, linear_config):
        assert ModelSpec.correct_for(linear_config).covariate_terms == ModelSpec.linear(2).covariate_terms

    def test_correct_model_for_nonlinear_heterogeneous_surface(self, hetero_config):
        model = ModelSpec.correct_for(hetero_config.with_overrides(nonlinear_outcome=True))
        assert set(model.covariate_terms) == {
            *ModelSpec.linear(2).covariate_terms,
            Term.square(0),
            Term.square(1),
            Term.product(0, 1),
            Term.treatment_interaction(0),
        }
        assert model.interaction_columns == (0,)

    def test_summary_recovers_effect_with_correct_model(self, linear_config):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(200, 2))
        W = np.tile([1, 0], 100)
        Y = 1.0 + 2.0 * W + 0.5 * X[:, 0] + X[:, 0] ** 2 - X[:, 1] ** 2 + 0.3 * X[:, 0] * X[:, 1]
        data = Dataset(X, W, Y)
        config = linear_config.with_overrides(nonlinear_outcome=True)
        summary = model_dependence_summary(MatchResult.unmatched(data.W), data, config, enumerate_models(2, limit=20))
        assert summary["models"] + summary["model_failures"] == 20
        assert summary["correct_estimate"] == pytest.approx(2.0, abs=1e-8)
        assert summary["estimate_variance"] >= 0


class TestRelativeEfficiency:
    def _inputs(self, alpha1, n_pairs=100, m_pairs=100):
        return EfficiencyInputs(1.0, np.array([0.0, 1.0]), np.array(alpha1), np.eye(2), n_pairs, m_pairs)

    def test_parallel_directions(self):
        assert relative_efficiency(self._inputs([0.0, 2.0])) == pytest.approx(1.0)

    def test_orthogonal_directions(self):
        assert relative_efficiency(self._inputs([1.0, 0.0])) == pytest.approx(0.5)

    def test_pair_ratio(self):
        assert relative_efficiency(self._inputs([0.0, 1.0], n_pairs=200)) == pytest.approx(2.0)

    def test_invalid_inputs(self):
        with pytest.raises(InvalidParameter):
            EfficiencyInputs(0.0, np.ones(2), np.ones(2), np.eye(2), 1, 1)
        with pytest.raises(InvalidParameter):
            relative_efficiency(self._inputs([1.0, 0.0], m_pairs=0))


class TestAggregate:
    def test_exact_estimates(self):
        metrics = summarize_estimates([6.0, 6.0, 6.0], 6.0)
        assert (metrics.bias, metrics.sd, metrics.mse) == (0.0, 0.0, 0.0)

    def test_spread(self):
        metrics = summarize_estimates([5.0, 7.0], 6.0)
        assert metrics.bias == 0.0
        assert metrics.sd == pytest.approx(math.sqrt(2.0))
        assert metrics.mse == pytest.approx(2.0)
        assert metrics.mse_population == pytest.approx(1.0)

    def test_bias(self):
        metrics = summarize_estimates([7.0, 7.0], 6.0)
        assert metrics.bias == pytest.approx(1.0)
        assert metrics.rmse == pytest.approx(1.0)

    def test_too_few(self):
        with pytest.raises(TooFewRecords):
            summarize_estimates([1.0], 0.0)

    def test_failures_counted(self):
        records = [
            EstimateRecord("linear", "PSM", 5.0, 5.0),
            EstimateRecord("linear", "PSM", 7.0, 7.0),
            EstimateRecord.failed("linear", "PSM", "EmptyMatch"),
        ]
        metrics = aggregate(records, 6.0)
        assert metrics.replication_count == 2
        assert metrics.failure_count == 1
        assert metrics.as_row()["Failures"] == 1

    def test_records_frame(self):
        frame = records_frame([EstimateRecord("interaction", "PSM", 1.0, 0.8, (0.1,), (0,), 3)])
        assert frame.loc[0, "replication"] == 3
        assert frame.loc[0, "theta_hat"] == "0.1"
        assert frame.loc[0, "failure"] == ""


class TestMatchedConsistency:
    def test_subsets_distinct(self):
        subsets = random_covariate_subsets(4, 6, seed=1)
        assert subsets[:2] == [(), (0, 1, 2, 3)]
        assert len(set(subsets)) == 6

    def test_subsets_capped(self):
        assert len(random_covariate_subsets(2, 10, seed=1)) == 4

    def test_small_run(self, linear_config):
        results = verify_matched_consistency(linear_config, [(), (0, 1)], n=400, replications=4)
        assert [r.subset for r in results] == [(), (0, 1)]
        for result in results:
            assert result.true_value == 6.0
            assert result.metrics.replication_count + result.metrics.failure_count == 4
        assert abs(results[1].metrics.bias) < 1.0
