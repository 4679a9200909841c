# tests/matching_test.py
from unittest.mock import patch

import pytest

from app.core.errors import InvalidParameter
from app.services.datagen import generate_dataset
from app.services.matching import coarsening_for, run_design, run_scenario_design
from app.services.propensity import PropensityMatcher


class TestRunDesign:
    def test_unmatched_keeps_everyone(self, linear_config):
        data = generate_dataset(linear_config, 0)
        match, coarsened = run_design(data, "Unmatched")
        assert match.matched_treated == match.m_T
        assert coarsened is None

    def test_coarsened_designs_return_bins(self, linear_config):
        data = generate_dataset(linear_config, 0)
        match, coarsened = run_design(data, "CEM-K3", cem_mode="one_to_one")
        assert match.design_label == "CEM-1to1"
        assert coarsened.bin_counts == (3, 3)

    def test_unknown_design(self, linear_config):
        with pytest.raises(InvalidParameter):
            run_design(generate_dataset(linear_config, 0), "CEM-K5")

    def test_psm_has_no_bins(self):
        with pytest.raises(InvalidParameter):
            coarsening_for("PSM")


class TestRunScenarioDesign:
    def test_scenario_caliper_unless_overridden(self, linear_config):
        config = linear_config.with_overrides(caliper_multiplier=0.05)
        data = generate_dataset(config, 0)
        with patch("app.services.matching.PropensityMatcher", wraps=PropensityMatcher) as matcher:
            run_scenario_design(data, "PSM", config)
            run_scenario_design(data, "PSM", config, caliper_multiplier=0.5)
        assert [c.args[1] for c in matcher.call_args_list] == [0.05, 0.5]

    def test_scenario_cem_mode(self, linear_config):
        config = linear_config.with_overrides(cem_mode="one_to_one")
        match, _ = run_scenario_design(generate_dataset(config, 0), "CEM-Auto", config)
        assert match.design_label == "CEM-1to1"
