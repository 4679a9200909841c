# tests/simulation_test.py
import math
from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest

from app.core.errors import DegenerateSample
from app.services.datagen import generate_dataset
from app.services.design import Term
from app.services.match_result import MatchResult
from app.services.propensity import PropensityFormula, PropensityMatcher
from app.services.simulation import (
    MODEL_DEPENDENCE_COLUMNS,
    ReplicationTask,
    build_cells,
    estimate_all,
    imbalance_summary,
    run_replication,
    simulate,
)


@pytest.fixture
def small_run_config(linear_config):
    return linear_config.with_overrides(replications=3)


class TestBuildCells:
    def test_single_cell_keeps_seed(self, linear_config):
        cells, pairs = build_cells(linear_config)
        assert len(cells) == 1 and pairs == []
        assert cells[0].config.seed == linear_config.seed
        assert cells[0].keys["pair_id"] == -1
        assert math.isnan(cells[0].sine_distance)

    def test_sample_size_sweep(self, linear_config):
        cells, _ = build_cells(linear_config.with_overrides(sample_sizes=[100, 200]))
        assert [c.config.n for c in cells] == [100, 200]
        assert cells[0].config.seed != cells[1].config.seed

    def test_pair_sweep(self, linear_config):
        cells, pairs = build_cells(linear_config.with_overrides(coefficient_pairs=3, sample_sizes=[100, 200]))
        assert len(pairs) == 3
        assert len(cells) == 6
        assert [c.index for c in cells] == list(range(6))
        first = cells[0]
        np.testing.assert_allclose(first.config.alpha1, pairs[0].alpha1)
        np.testing.assert_allclose(first.config.beta2, pairs[0].beta2)
        assert first.sine_distance == pytest.approx(pairs[0].sine_distance)


class TestReplication:
    def test_rows_per_design_and_estimator(self, small_run_config):
        cells, _ = build_cells(small_run_config)
        output = run_replication(ReplicationTask(cells[0], 0))
        assert len(output.estimates) == 3 * 2
        assert {row["design"] for row in output.samples} == {"PSM", "CEM-Auto", "CEM-K3"}
        assert 0 < output.treated_fraction < 1
        assert {row["metric"] for row in output.balance} >= {"smd", "abs_mean_diff"}

    def test_failed_draw(self, small_run_config):
        cells, _ = build_cells(small_run_config)
        with patch("app.services.simulation.draw_dataset", side_effect=DegenerateSample("constant W")):
            output = run_replication(ReplicationTask(cells[0], 1))
        assert len(output.estimates) == 6
        assert all(row["failure"] == "DegenerateSample" for row in output.estimates)
        assert all(row["replication"] == 1 for row in output.estimates)
        assert output.treated_fraction is None

    def test_patt_estimators_share_fit(self, hetero_config):
        data = generate_dataset(hetero_config, 0)
        records = estimate_all(hetero_config, data, MatchResult.unmatched(data.W), 0)
        assert [r.estimator_label for r in records] == ["unadjusted", "patt-matched", "patt-source"]
        assert records[1].beta1_hat == records[2].beta1_hat
        # every treated unit is retained without matching
        assert records[1].point_estimate == pytest.approx(records[2].point_estimate)

    def test_nonlinear_treatment_fits_squares_and_products(self, linear_config):
        config = linear_config.with_overrides(
            nonlinear_treatment=True, designs=["PSM"], estimators=["unadjusted"], replications=2
        )
        cells, _ = build_cells(config)
        with patch("app.services.matching.PropensityMatcher", wraps=PropensityMatcher) as matcher:
            run_replication(ReplicationTask(cells[0], 0))
        formula = matcher.call_args.args[0]
        assert Term.square(0) in formula.terms
        assert Term.square(1) in formula.terms
        assert Term.product(0, 1) in formula.terms
        assert formula.description == PropensityFormula.for_scenario(config).description

    def test_linear_treatment_fits_linear_logit(self, small_run_config):
        cells, _ = build_cells(small_run_config.with_overrides(designs=["PSM"]))
        with patch("app.services.matching.PropensityMatcher", wraps=PropensityMatcher) as matcher:
            run_replication(ReplicationTask(cells[0], 0))
        assert matcher.call_args.args[0].description == "1 + x1 + x2"

    def test_coarsened_designs_record_within_bin_imbalance(self, small_run_config):
        cells, _ = build_cells(small_run_config)
        output = run_replication(ReplicationTask(cells[0], 0))
        residual = [row for row in output.balance if row["metric"] == "within_bin"]
        assert {row["design"] for row in residual} == {"CEM-Auto", "CEM-K3"}
        assert all(row["value"] >= 0 for row in residual)

    def test_samples_carry_both_weight_conventions(self, small_run_config):
        cells, _ = build_cells(small_run_config)
        output = run_replication(ReplicationTask(cells[0], 0))
        for row in output.samples:
            # retained totals give the controls the matched-control count of weight
            assert row["control_weight_total"] == pytest.approx(row["matched_control"])
            if row["design"] == "CEM-Auto":
                expected = row["matched_treated"] * row["m_C"] / row["m_T"]
                assert row["control_weight_total_source"] == pytest.approx(expected)

    def test_model_sweep(self, small_run_config):
        config = small_run_config.with_overrides(designs=["PSM", "Unmatched"], model_sweep_degree=2)
        cells, _ = build_cells(config)
        output = run_replication(ReplicationTask(cells[0], 0))
        assert [row["design"] for row in output.model_dependence] == ["PSM", "Unmatched"]
        for row in output.model_dependence:
            # five monomials of degree <= 2 in two covariates
            assert row["models"] + row["model_failures"] == 32
            assert row["estimate_variance"] >= 0
        linear = {row["design"]: row["estimate"] for row in output.estimates if row["estimator"] == "linear"}
        # the outcome surface is linear, so the all-terms model is the linear one
        for row in output.model_dependence:
            assert row["correct_estimate"] == pytest.approx(linear[row["design"]])


class TestSimulate:
    def test_tables(self, small_run_config):
        results = simulate(small_run_config)
        assert len(results.replications) == 3 * 3 * 2
        assert len(results.aggregate) == 3 * 2
        assert set(results.aggregate["Design"]) == {"PSM", "CEM-Auto", "CEM-K3"}
        assert (results.aggregate["True Value"] == 6.0).all()
        assert results.failure_count == 0
        cross = results.imbalance[results.imbalance["metric"] == "cross_replication"]
        assert len(cross) == 3
        assert (cross["value"] >= 0).all()
        residual = results.imbalance[results.imbalance["metric"] == "within_bin"]
        assert set(residual["design"]) == {"CEM-Auto", "CEM-K3"}
        assert results.model_dependence.empty
        assert list(results.model_dependence.columns) == MODEL_DEPENDENCE_COLUMNS

    def test_worker_count_does_not_change_results(self, small_run_config):
        serial = simulate(small_run_config, workers=1)
        pooled = simulate(small_run_config, workers=2)
        pd.testing.assert_frame_equal(serial.replications, pooled.replications)
        pd.testing.assert_frame_equal(serial.aggregate, pooled.aggregate)

    def test_every_draw_fails(self, small_run_config):
        with patch("app.services.simulation.draw_dataset", side_effect=DegenerateSample("constant W")):
            results = simulate(small_run_config)
        assert results.failure_count == 18
        assert results.aggregate["Bias"].isna().all()
        assert (results.aggregate["Failures"] == 3).all()
        assert results.imbalance.empty

    def test_heterogeneous_truth(self, hetero_config):
        config = hetero_config.with_overrides(replications=3, designs=["PSM"])
        results = simulate(config, oracle_draws=100_000)
        assert list(results.aggregate["Model"]) == ["unadjusted", "patt-matched", "patt-source"]
        truth = results.aggregate["True Value"].iloc[0]
        # x1 is shifted up among the treated
        assert truth > 2.0
        assert (results.aggregate["Oracle SE"] > 0).all()


class TestImbalanceSummary:
    def test_signed_means_cancel(self):
        keys = {"cell": 0, "pair_id": -1, "sine_distance": np.nan, "n": 10, "design": "PSM", "metric": "smd"}
        balance = pd.DataFrame(
            [
                {**keys, "replication": 0, "covariate": "x1", "value": 0.5},
                {**keys, "replication": 1, "covariate": "x1", "value": -0.5},
            ]
        )
        summary = imbalance_summary(balance, pd.DataFrame())
        cross = summary[summary["metric"] == "cross_replication"]["value"]
        assert cross.iloc[0] == pytest.approx(0.0)
