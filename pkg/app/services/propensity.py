# app/services/propensity.py
"""
Propensity-score estimation and greedy 1:1 nearest-neighbor matching on the
logit scale under a caliper.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from app.core.config import settings
from app.core.errors import InvalidParameter, Separation, TooFewUnits
from app.core.logging import get_logger
from app.services.datagen import Dataset
from app.services.design import Term, build_design, describe_terms, linear_terms
from app.services.match_result import DESIGN_PSM, MatchResult
from app.services.numerics import FitResult, fit_logistic
from app.services.scenario import ScenarioConfig

logger = get_logger(__name__)


@dataclass(frozen=True)
class PropensityFormula:
    """Covariate terms of the treatment logit."""

    terms: tuple[Term, ...] = ()
    intercept: bool = True

    @classmethod
    def intercept_only(cls) -> "PropensityFormula":
        return cls(())

    @classmethod
    def linear(cls, p: int) -> "PropensityFormula":
        return cls(linear_terms(range(p)))

    @classmethod
    def for_scenario(cls, config: ScenarioConfig) -> "PropensityFormula":
        """The correctly specified formula for a scenario's treatment model."""
        terms = list(linear_terms(range(config.p)))
        if config.nonlinear_treatment:
            terms += [Term.square(j) for j in range(config.p)]
            terms += [Term.product(j, j + 1) for j in range(config.p - 1)]
        return cls(tuple(terms))

    @property
    def description(self) -> str:
        return describe_terms(self.terms, self.intercept)


@dataclass(frozen=True)
class PropensityResult:
    scores: np.ndarray
    logits: np.ndarray
    model: FitResult
    formula_spec: str


def estimate_propensity(data: Dataset, formula: Optional[PropensityFormula] = None) -> PropensityResult:
    """
    Fit the logit treatment model and score every unit.

    Args:
        data: Source sample; W must take both values
        formula: Logit terms, linear in every covariate by default

    Returns:
        PropensityResult with scores e(X) and their logits
    """
    formula = PropensityFormula.linear(data.p) if formula is None else formula
    design = build_design(data.X, formula.terms, intercept=formula.intercept)
    model = fit_logistic(design, data.W)
    logits = design.values @ model.coefficients
    scores = expit(logits)
    if np.any(scores <= 0.0) or np.any(scores >= 1.0):
        raise Separation("Estimated propensity scores reach 0 or 1")
    return PropensityResult(scores, logits, model, formula.description)


def caliper_width(logits: np.ndarray, multiplier: Optional[float] = None) -> float:
    """multiplier x SD (n - 1 denominator) of the pooled logit scores."""
    multiplier = settings.CALIPER_MULTIPLIER if multiplier is None else multiplier
    if multiplier <= 0:
        raise InvalidParameter(f"Caliper multiplier must be positive, got {multiplier}")
    logits = np.asarray(logits, dtype=float)
    if logits.size < 2:
        raise TooFewUnits("Caliper needs at least two units")
    return float(multiplier * np.std(logits, ddof=1))


def psm_match(
    logits: np.ndarray, W: np.ndarray, caliper: float, order_seed: Optional[int] = None
) -> MatchResult:
    """
    Greedy nearest-neighbor matching without replacement.

    Treated units are visited in descending logit order (lower index first on ties),
    or in a random order when ``order_seed`` is given. Each takes the closest
    still-available control when it lies within the caliper; otherwise it is pruned.
    Equally distant controls resolve to the lower index.
    """
    if caliper < 0:
        raise InvalidParameter(f"Caliper must be non-negative, got {caliper}")
    logits = np.asarray(logits, dtype=float)
    W = np.asarray(W)
    treated = np.flatnonzero(W == 1)
    controls = np.flatnonzero(W == 0)
    if order_seed is None:
        order = treated[np.lexsort((treated, -logits[treated]))]
    else:
        order = np.random.default_rng(order_seed).permutation(treated)

    control_logits = logits[controls]
    available = np.ones(controls.size, dtype=bool)
    pairs = []
    for t in order:
        if not available.any():
            break
        distance = np.where(available, np.abs(control_logits - logits[t]), np.inf)
        j = int(np.argmin(distance))
        if distance[j] <= caliper:
            available[j] = False
            pairs.append((t, controls[j]))

    weights = np.zeros(W.shape[0])
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    weights[pairs.ravel()] = 1.0
    logger.debug(f"PSM matched {pairs.shape[0]} of {treated.size} treated units (caliper {caliper:.4g})")
    return MatchResult(W, pairs, weights, DESIGN_PSM)


class PropensityMatcher:
    """Estimate scores, size the caliper and match, for one formula/caliper setting."""

    def __init__(
        self,
        formula: Optional[PropensityFormula] = None,
        caliper_multiplier: Optional[float] = None,
        order_seed: Optional[int] = None,
    ):
        self.formula = formula
        self.caliper_multiplier = (
            settings.CALIPER_MULTIPLIER if caliper_multiplier is None else caliper_multiplier
        )
        self.order_seed = order_seed

    def match(self, data: Dataset) -> tuple[MatchResult, PropensityResult]:
        propensity = estimate_propensity(data, self.formula)
        caliper = caliper_width(propensity.logits, self.caliper_multiplier)
        return psm_match(propensity.logits, data.W, caliper, self.order_seed), propensity
