# tests/match_result_test.py
import numpy as np
import pytest

from app.core.errors import DimensionMismatch, SchemaError
from app.services.cem import CoarseningSpec, Cutpoints, cem_match, coarsen
from app.services.datagen import Dataset
from app.services.match_result import MATCH_COLUMNS, MATCH_TABLE_COLUMNS, MatchResult


@pytest.fixture
def psm_result():
    W = np.array([1, 1, 0, 0, 0])
    return MatchResult(W, np.array([[0, 2], [1, 4]]), np.array([1.0, 1.0, 1.0, 0.0, 1.0]), "PSM")


@pytest.fixture
def cem_dataset():
    """Two mixed strata plus a control-only stratum at x >= 3"""
    X = np.array([-1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 5.0])
    W = np.array([1, 0, 0, 1, 0, 0, 0])
    return Dataset(X, W, np.zeros(7))


@pytest.fixture
def cem_result(cem_dataset):
    return cem_match(cem_dataset, coarsen(cem_dataset, CoarseningSpec.uniform(Cutpoints((0.0, 3.0)))))


class TestMatchResult:
    def test_counts(self, psm_result):
        assert (psm_result.m_T, psm_result.m_C) == (2, 3)
        assert (psm_result.matched_treated, psm_result.matched_control) == (2, 2)
        assert psm_result.pair_count == 2
        assert psm_result.treated_share_delta == pytest.approx(0.5)
        assert not psm_result.is_empty

    def test_unmatched_keeps_everyone(self):
        result = MatchResult.unmatched(np.array([1, 0, 0]))
        np.testing.assert_array_equal(result.weights, [1.0, 1.0, 1.0])
        assert result.design_label == "Unmatched"

    def test_empty(self):
        result = MatchResult.empty(np.array([1, 0]), "PSM")
        assert result.is_empty
        assert result.treated_share_delta == 0.0

    def test_pairs_must_be_treated_then_control(self):
        with pytest.raises(SchemaError):
            MatchResult(np.array([1, 0]), np.array([[1, 0]]), np.ones(2), "PSM")

    def test_unit_in_two_pairs(self):
        with pytest.raises(SchemaError):
            MatchResult(np.array([1, 1, 0]), np.array([[0, 2], [1, 2]]), np.ones(3), "PSM")

    def test_psm_weights_are_binary(self):
        with pytest.raises(SchemaError):
            MatchResult(np.array([1, 0]), np.array([[0, 1]]), np.array([1.0, 0.5]), "PSM")

    def test_unknown_label(self):
        with pytest.raises(SchemaError):
            MatchResult(np.array([1, 0]), np.empty((0, 2)), np.ones(2), "CEM-Fancy")

    def test_weight_length(self):
        with pytest.raises(DimensionMismatch):
            MatchResult(np.array([1, 0]), np.empty((0, 2)), np.ones(3), "Unmatched")

    def test_summary_keys(self, psm_result):
        assert set(psm_result.summary()) == {
            "design",
            "m_T",
            "m_C",
            "matched_treated",
            "matched_control",
            "pairs",
            "strata",
            "treated_share",
            "control_weight_total",
            "control_weight_total_source",
        }


class TestControlWeights:
    def test_conventions(self, cem_result):
        np.testing.assert_allclose(cem_result.weights, [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0])
        # source totals: 5 controls for 2 treated instead of 4 retained controls
        source = cem_result.control_weights("source")
        np.testing.assert_allclose(source, [1.0, 1.25, 1.25, 1.0, 1.25, 1.25, 0.0])
        np.testing.assert_array_equal(cem_result.control_weights("retained"), cem_result.weights)

    def test_pairs_ignore_convention(self, psm_result):
        np.testing.assert_array_equal(psm_result.control_weights("source"), psm_result.weights)

    def test_unknown_convention(self, psm_result):
        with pytest.raises(SchemaError):
            psm_result.control_weights("total")

    def test_weight_totals(self, cem_result, psm_result):
        assert cem_result.control_weight_total() == pytest.approx(4.0)
        assert cem_result.control_weight_total("source") == pytest.approx(5.0)
        summary = psm_result.summary()
        assert summary["control_weight_total"] == summary["control_weight_total_source"] == pytest.approx(2.0)


class TestMatchTable:
    def test_frame_layout(self, psm_result):
        frame = psm_result.to_frame()
        assert list(frame.columns) == MATCH_TABLE_COLUMNS
        assert MATCH_TABLE_COLUMNS[: len(MATCH_COLUMNS)] == MATCH_COLUMNS
        assert frame["role"].tolist() == ["treated", "treated", "control", "pruned", "control"]
        assert frame["pair_id"].isna().tolist() == [False, False, False, True, False]

    def test_psm_csv_round_trip(self, tmp_path, psm_result):
        path = psm_result.write_csv(tmp_path / "match.csv")
        loaded = MatchResult.read_csv(path, psm_result.W)
        assert loaded.design_label == "PSM"
        np.testing.assert_array_equal(loaded.pairs, psm_result.pairs)
        np.testing.assert_array_equal(loaded.weights, psm_result.weights)

    def test_source_weights_column(self, tmp_path, cem_result):
        frame = cem_result.to_frame()
        np.testing.assert_allclose(frame["weight_source"], cem_result.control_weights("source"))
        np.testing.assert_allclose(frame["weight"], cem_result.weights)
        # the extra column is ignored on read; retained weights come back
        loaded = MatchResult.read_csv(cem_result.write_csv(tmp_path / "match.csv"), cem_result.W)
        np.testing.assert_allclose(loaded.weights, cem_result.weights)

    def test_strata_infer_cem_weights(self, cem_result):
        loaded = MatchResult.from_frame(cem_result.to_frame(), cem_result.W)
        assert loaded.design_label == "CEM-weights"
        np.testing.assert_array_equal(loaded.stratum_ids, cem_result.stratum_ids)
        assert loaded.stratum_count == 2

    def test_roles_must_agree_with_treatment(self, psm_result):
        with pytest.raises(SchemaError):
            MatchResult.from_frame(psm_result.to_frame(), np.array([0, 1, 0, 0, 0]))

    def test_unit_count_must_agree(self, psm_result):
        with pytest.raises(DimensionMismatch):
            MatchResult.from_frame(psm_result.to_frame(), np.array([1, 1, 0, 0]))
