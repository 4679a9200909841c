# app/services/matching.py
"""Dispatch from a design name (PSM, CEM-Auto, CEM-K3, Unmatched) to a matcher."""

from typing import Literal, Optional

from app.core.config import settings
from app.core.errors import InvalidParameter
from app.services.cem import CoarsenedData, CoarseningMatcher, CoarseningSpec
from app.services.datagen import Dataset
from app.services.match_result import MatchResult
from app.services.propensity import PropensityFormula, PropensityMatcher
from app.services.scenario import CEM_AUTO, CEM_K3, PSM, UNMATCHED, ScenarioConfig


def coarsening_for(design: str) -> CoarseningSpec:
    if design == CEM_AUTO:
        return CoarseningSpec.auto()
    if design == CEM_K3:
        return CoarseningSpec.fixed(settings.CEM_FIXED_BINS)
    raise InvalidParameter(f"{design} is not a coarsened design")


def run_design(
    data: Dataset,
    design: str,
    caliper_multiplier: Optional[float] = None,
    cem_mode: Literal["weights", "one_to_one"] = "weights",
    formula: Optional[PropensityFormula] = None,
) -> tuple[MatchResult, Optional[CoarsenedData]]:
    """
    Run one named design on a dataset.

    Args:
        data: Sample to match
        design: PSM, CEM-Auto, CEM-K3 or Unmatched
        caliper_multiplier: PSM caliper in SDs of the logit score
        cem_mode: "weights" or "one_to_one" for the CEM designs
        formula: PSM logit terms, linear in every covariate by default

    Returns:
        MatchResult of the design, plus the coarsened covariates for the CEM designs
    """
    if design == PSM:
        return PropensityMatcher(formula, caliper_multiplier).match(data)[0], None
    if design in (CEM_AUTO, CEM_K3):
        return CoarseningMatcher(coarsening_for(design), cem_mode).match(data)
    if design == UNMATCHED:
        return MatchResult.unmatched(data.W), None
    raise InvalidParameter(f"Unknown design {design!r}")


def run_scenario_design(
    data: Dataset, design: str, config: ScenarioConfig, caliper_multiplier: Optional[float] = None
) -> tuple[MatchResult, Optional[CoarsenedData]]:
    """run_design with the scenario's caliper, CEM mode and correctly specified treatment model."""
    caliper_multiplier = config.caliper_multiplier if caliper_multiplier is None else caliper_multiplier
    return run_design(data, design, caliper_multiplier, config.cem_mode, PropensityFormula.for_scenario(config))
