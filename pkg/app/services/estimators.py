# app/services/estimators.py
"""
Post-matching effect estimation and its evaluation across replications.

Outcome models are fitted by (weighted) least squares on the retained units of a
match, always with the treatment indicator W. Interaction models add W:x terms;
their PATT combines the W coefficient with the treated mean of the modifiers.
"""

import math
from dataclasses import dataclass, replace
from functools import partial
from itertools import combinations
from typing import Literal, Optional, Sequence

import numpy as np
import pandas as pd

from app.core.config import settings
from app.core.errors import (
    EmptyMatch,
    InvalidParameter,
    MatchingLabError,
    NoTreatedUnits,
    TooFewModels,
    TooFewRecords,
)
from app.core.logging import get_logger
from app.services.datagen import Dataset, draw_dataset, sine_distance, true_patt_oracle
from app.services.design import Term, build_design, describe_terms, linear_terms, monomial_pool
from app.services.match_result import MatchResult
from app.services.matching import run_scenario_design
from app.services.numerics import fit_ols, sample_covariance
from app.services.parallel import parallel_map
from app.services.scenario import (
    INTERACTION,
    INTERACTION_ESTIMATORS,
    LINEAR,
    PATT_MATCHED,
    PSM,
    UNADJUSTED,
    ScenarioConfig,
)

logger = get_logger(__name__)

MODEL_ENUMERATION_LIMIT = 512


@dataclass(frozen=True)
class ModelSpec:
    """Outcome model: W plus covariate terms (some possibly multiplied by W)."""

    label: str
    covariate_terms: tuple[Term, ...] = ()

    @classmethod
    def unadjusted(cls) -> "ModelSpec":
        return cls(UNADJUSTED)

    @classmethod
    def linear(cls, p: int) -> "ModelSpec":
        return cls(LINEAR, linear_terms(range(p)))

    @classmethod
    def interaction(cls, subset: Sequence[int], p: int) -> "ModelSpec":
        """Linear terms in every covariate plus W:x_j for j in subset (0-based)."""
        if not subset:
            raise InvalidParameter("An interaction model needs at least one modifier")
        terms = linear_terms(range(p)) + tuple(Term.treatment_interaction(j) for j in subset)
        return cls(INTERACTION, terms)

    @classmethod
    def covariate_subset(cls, columns: Sequence[int]) -> "ModelSpec":
        columns = tuple(sorted(columns))
        if not columns:
            return cls.unadjusted()
        return cls(describe_terms(linear_terms(columns), intercept=False), linear_terms(columns))

    @classmethod
    def custom(cls, terms: Sequence[Term], label: Optional[str] = None) -> "ModelSpec":
        terms = tuple(terms)
        return cls(label or describe_terms(terms, intercept=False), terms)

    @classmethod
    def for_scenario(cls, config: ScenarioConfig, estimator: str) -> "ModelSpec":
        """The named estimator's model for a scenario (misspecified when the outcome is nonlinear)."""
        if estimator == UNADJUSTED:
            return cls.unadjusted()
        if estimator == LINEAR:
            return cls.linear(config.p)
        if estimator in INTERACTION_ESTIMATORS or estimator == INTERACTION:
            return cls.interaction(config.interaction_columns, config.p)
        raise InvalidParameter(f"Unknown estimator {estimator!r}")

    @classmethod
    def correct_for(cls, config: ScenarioConfig) -> "ModelSpec":
        """Outcome model that contains every term of the scenario's outcome surface."""
        terms = list(linear_terms(range(config.p)))
        if config.nonlinear_outcome:
            terms += [Term.square(j) for j in range(config.p)]
            terms += [Term.product(j, j + 1) for j in range(config.p - 1)]
        terms += [Term.treatment_interaction(j) for j in config.interaction_columns]
        return cls("correct", tuple(terms))

    @property
    def interaction_columns(self) -> tuple[int, ...]:
        return tuple(t.columns[0] for t in self.covariate_terms if t.treated)


@dataclass(frozen=True)
class EstimateRecord:
    estimator_label: str
    design_label: str
    point_estimate: float
    beta1_hat: float
    theta_hat: tuple[float, ...] = ()
    interaction_columns: tuple[int, ...] = ()
    replication_index: Optional[int] = None
    failure: Optional[str] = None

    @property
    def succeeded(self) -> bool:
        return self.failure is None and math.isfinite(self.point_estimate)

    @classmethod
    def failed(
        cls, estimator_label: str, design_label: str, reason: str, replication_index: Optional[int] = None
    ) -> "EstimateRecord":
        return cls(estimator_label, design_label, math.nan, math.nan, replication_index=replication_index, failure=reason)


@dataclass(frozen=True)
class AggregateMetrics:
    """
    Replication summary of one estimator. ``mse`` uses the sample SD;
    ``mse_population`` rescales the variance by (K - 1)/K.
    """

    mean_estimate: float
    bias: float
    sd: float
    mse: float
    rmse: float
    mse_population: float
    true_value: float
    replication_count: int
    failure_count: int = 0

    @property
    def bias_standard_error(self) -> float:
        return self.sd / math.sqrt(self.replication_count)

    def as_row(self) -> dict:
        return {
            "Mean Estimate": self.mean_estimate,
            "Bias": self.bias,
            "SD": self.sd,
            "MSE": self.mse,
            "Root MSE": self.rmse,
            "MSE (population)": self.mse_population,
            "True Value": self.true_value,
            "Replications": self.replication_count,
            "Failures": self.failure_count,
        }


@dataclass(frozen=True)
class EfficiencyInputs:
    sigma_eps2: float
    beta2: np.ndarray
    alpha1: np.ndarray
    covariance_matched: np.ndarray
    n_psm_pairs: int
    m_cov_pairs: int

    def __post_init__(self):
        if self.sigma_eps2 <= 0:
            raise InvalidParameter("sigma_eps2 must be positive")
        covariance = np.atleast_2d(np.asarray(self.covariance_matched, dtype=float))
        if not np.allclose(covariance, covariance.T):
            raise InvalidParameter("Matched covariance must be symmetric")
        object.__setattr__(self, "covariance_matched", covariance)
        object.__setattr__(self, "beta2", np.asarray(self.beta2, dtype=float))
        object.__setattr__(self, "alpha1", np.asarray(self.alpha1, dtype=float))


def estimate(
    match: MatchResult,
    data: Dataset,
    model: ModelSpec,
    replication_index: Optional[int] = None,
) -> EstimateRecord:
    """
    Fit the outcome model on the retained units of a match.

    Uses weighted least squares when the retained weights are not all 1. The point
    estimate is the W coefficient; interaction models also report the W:x
    coefficients.
    """
    if match.is_empty:
        raise EmptyMatch(f"{match.design_label} match retained no units from one of the groups")
    retained = match.retained_mask
    weights = match.weights[retained]
    design = build_design(data.X[retained], model.covariate_terms, W=data.W[retained], include_treatment=True)
    fit = fit_ols(design, data.Y[retained], None if np.all(weights == 1.0) else weights)
    beta1 = fit.coefficient("W")
    theta = tuple(fit.coefficient(t.label) for t in model.covariate_terms if t.treated)
    return EstimateRecord(
        estimator_label=model.label,
        design_label=match.design_label,
        point_estimate=beta1,
        beta1_hat=beta1,
        theta_hat=theta,
        interaction_columns=model.interaction_columns,
        replication_index=replication_index,
    )


def patt_from_interaction(
    record: EstimateRecord,
    x1_mean_source: Literal["matched_treated", "unmatched_treated"],
    data: Dataset,
    match: MatchResult,
) -> float:
    """
    beta1_hat + theta_hat . mean of the modifiers over the treated units.

    "matched_treated" averages over the retained treated units of the match,
    "unmatched_treated" over every treated unit of the source data.
    """
    if not record.theta_hat:
        return record.beta1_hat
    if x1_mean_source == "matched_treated":
        treated = (data.W == 1) & match.retained_mask
    elif x1_mean_source == "unmatched_treated":
        treated = data.W == 1
    else:
        raise InvalidParameter(f"Unknown mean source {x1_mean_source!r}")
    if not treated.any():
        raise NoTreatedUnits("No treated units to average the effect modifiers over")
    modifier_means = data.X[treated][:, list(record.interaction_columns)].mean(axis=0)
    return float(record.beta1_hat + np.dot(record.theta_hat, modifier_means))


def patt_record(record: EstimateRecord, estimator: str, data: Dataset, match: MatchResult) -> EstimateRecord:
    """Copy of an interaction-model record carrying the PATT of a named estimator."""
    if estimator not in INTERACTION_ESTIMATORS:
        raise InvalidParameter(f"{estimator!r} is not a PATT estimator")
    source = "matched_treated" if estimator == PATT_MATCHED else "unmatched_treated"
    return replace(
        record,
        estimator_label=estimator,
        point_estimate=patt_from_interaction(record, source, data, match),
    )


def cherry_pick_diagnostic(estimates: Sequence[float]) -> tuple[float, float]:
    """(sample variance, maximum) of one effect estimated under several models."""
    estimates = np.asarray(estimates, dtype=float)
    if estimates.size < 2:
        raise TooFewModels(f"Need at least two model estimates, got {estimates.size}")
    return float(np.var(estimates, ddof=1)), float(estimates.max())


def enumerate_models(p: int, max_degree: int = 3, limit: int = MODEL_ENUMERATION_LIMIT) -> list[ModelSpec]:
    """
    Outcome models W + S for subsets S of the degree 1..max_degree monomials,
    smallest subsets first, stopping at ``limit`` models. Two covariates with
    cubic terms give nine monomials and exactly 512 models.
    """
    pool = monomial_pool(p, max_degree)
    models: list[ModelSpec] = []
    for size in range(len(pool) + 1):
        for subset in combinations(pool, size):
            models.append(ModelSpec.custom(subset, "unadjusted" if not subset else None))
            if len(models) >= limit:
                return models
    return models


@dataclass(frozen=True)
class CherryPickResult:
    estimates: np.ndarray
    labels: tuple[str, ...]
    variance: float
    max_estimate: float
    failure_count: int


def cherry_pick_sweep(match: MatchResult, data: Dataset, models: Sequence[ModelSpec]) -> CherryPickResult:
    """Estimate the effect under every model and summarize the spread."""
    estimates, labels, failures = [], [], 0
    for model in models:
        try:
            record = estimate(match, data, model)
        except MatchingLabError as e:
            logger.debug(f"Model {model.label} failed: {e}")
            failures += 1
            continue
        estimates.append(record.point_estimate)
        labels.append(model.label)
    variance, max_estimate = cherry_pick_diagnostic(estimates)
    return CherryPickResult(np.asarray(estimates), tuple(labels), variance, max_estimate, failures)


def model_dependence_summary(
    match: MatchResult, data: Dataset, config: ScenarioConfig, models: Sequence[ModelSpec]
) -> dict:
    """
    Spread of the effect over an enumerated model family on one match, next to
    the estimate of the model that holds every term of the outcome surface.
    """
    sweep = cherry_pick_sweep(match, data, models)
    correct = estimate(match, data, ModelSpec.correct_for(config))
    return {
        "models": len(sweep.labels),
        "model_failures": sweep.failure_count,
        "estimate_variance": sweep.variance,
        "max_estimate": sweep.max_estimate,
        "correct_estimate": correct.point_estimate,
    }


def relative_efficiency(inputs: EfficiencyInputs) -> float:
    """
    Efficiency of PSM relative to exact covariate matching:
    sigma_eps2 / (sigma_nu2 + sigma_eps2) * n / m, with
    sigma_nu2 = sin^2(angle(alpha1, beta2)) * beta2' Sigma beta2.
    """
    if inputs.m_cov_pairs < 1:
        raise InvalidParameter("m_cov_pairs must be at least 1")
    sin2 = sine_distance(inputs.alpha1, inputs.beta2) ** 2
    sigma_nu2 = sin2 * float(inputs.beta2 @ inputs.covariance_matched @ inputs.beta2)
    return inputs.sigma_eps2 / (sigma_nu2 + inputs.sigma_eps2) * inputs.n_psm_pairs / inputs.m_cov_pairs


def relative_efficiency_inputs(
    config: ScenarioConfig, data: Dataset, psm: MatchResult, covariate_match: MatchResult
) -> EfficiencyInputs:
    """EfficiencyInputs from a scenario and its two matches on one dataset."""
    return EfficiencyInputs(
        sigma_eps2=config.error_sd**2,
        beta2=np.asarray(config.beta2),
        alpha1=np.asarray(config.alpha1),
        covariance_matched=sample_covariance(data.X[psm.retained_mask]),
        n_psm_pairs=psm.pair_count,
        m_cov_pairs=covariate_match.pair_count,
    )


def summarize_estimates(estimates: Sequence[float], true_value: float, failure_count: int = 0) -> AggregateMetrics:
    """Bias, SD (K - 1 denominator), MSE and RMSE of successful estimates."""
    estimates = np.asarray(estimates, dtype=float)
    if estimates.size < 2:
        raise TooFewRecords(f"Need at least two successful estimates, got {estimates.size}")
    k = estimates.size
    mean = float(estimates.mean())
    bias = mean - true_value
    sd = float(np.std(estimates, ddof=1))
    mse = bias**2 + sd**2
    return AggregateMetrics(
        mean_estimate=mean,
        bias=bias,
        sd=sd,
        mse=mse,
        rmse=math.sqrt(mse),
        mse_population=bias**2 + sd**2 * (k - 1) / k,
        true_value=float(true_value),
        replication_count=k,
        failure_count=failure_count,
    )


def aggregate(records: Sequence[EstimateRecord], true_value: float) -> AggregateMetrics:
    successes = [r.point_estimate for r in records if r.succeeded]
    return summarize_estimates(successes, true_value, len(records) - len(successes))


def records_frame(records: Sequence[EstimateRecord]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "replication": r.replication_index,
                "design": r.design_label,
                "estimator": r.estimator_label,
                "estimate": r.point_estimate,
                "beta1_hat": r.beta1_hat,
                "theta_hat": ";".join(repr(t) for t in r.theta_hat),
                "failure": r.failure or "",
            }
            for r in records
        ]
    )


def random_covariate_subsets(p: int, count: int, seed: int) -> list[tuple[int, ...]]:
    """
    Distinct covariate subsets (0-based indices): the empty set, the full set, then
    random subsets until ``count`` are collected or all 2^p are used.
    """
    if count < 1:
        raise InvalidParameter("count must be at least 1")
    count = min(count, 2**p)
    subsets: list[tuple[int, ...]] = [()]
    if count > 1:
        subsets.append(tuple(range(p)))
    rng = np.random.default_rng(seed)
    while len(subsets) < count:
        candidate = tuple(int(j) for j in np.flatnonzero(rng.random(p) < 0.5))
        if candidate not in subsets:
            subsets.append(candidate)
    return subsets


@dataclass(frozen=True)
class SubsetConsistency:
    subset: tuple[int, ...]
    metrics: AggregateMetrics
    true_value: float
    oracle_standard_error: float
    caliper_multiplier: float
    design: str = PSM


def _consistency_replication(
    replication_index: int,
    config: ScenarioConfig,
    subsets: Sequence[tuple[int, ...]],
    design: str,
    caliper_multiplier: float,
) -> list[Optional[float]]:
    try:
        data = draw_dataset(config, replication_index)
        match = run_scenario_design(data, design, config, caliper_multiplier)[0]
    except MatchingLabError as e:
        logger.warning(f"Replication {replication_index}: {e}")
        return [None] * len(subsets)
    estimates: list[Optional[float]] = []
    for subset in subsets:
        try:
            estimates.append(estimate(match, data, ModelSpec.covariate_subset(subset)).point_estimate)
        except MatchingLabError as e:
            logger.warning(f"Replication {replication_index}, subset {subset}: {e}")
            estimates.append(None)
    return estimates


def verify_matched_consistency(
    config: ScenarioConfig,
    subsets: Sequence[Sequence[int]],
    n: Optional[int] = None,
    replications: Optional[int] = None,
    caliper_multiplier: Optional[float] = None,
    design: str = PSM,
    workers: int = 1,
    oracle_draws: Optional[int] = None,
) -> list[SubsetConsistency]:
    """
    Fit W + linear terms of each covariate subset on tightly matched data and
    compare the W coefficient with the true PATT.

    Args:
        config: Scenario to simulate
        subsets: 0-based covariate index sets; the empty set is the unadjusted model
        n: Sample size override
        replications: Replication count override
        caliper_multiplier: PSM caliper, the tight setting by default
        design: Matching design to test (PSM, or a CEM design for contrast)
        workers: Worker processes
        oracle_draws: Draws for the true-PATT oracle

    Returns:
        One SubsetConsistency per subset, in input order
    """
    caliper_multiplier = settings.CONSISTENCY_CALIPER_MULTIPLIER if caliper_multiplier is None else caliper_multiplier
    overrides = {}
    if n is not None:
        overrides["n"] = n
    if replications is not None:
        overrides["replications"] = replications
    config = config.with_overrides(**overrides) if overrides else config
    subsets = [tuple(sorted(s)) for s in subsets]
    oracle = true_patt_oracle(config, oracle_draws or config.oracle_draws)

    run = partial(
        _consistency_replication,
        config=config,
        subsets=subsets,
        design=design,
        caliper_multiplier=caliper_multiplier,
    )
    per_replication = parallel_map(run, range(config.replications), workers)

    results = []
    for k, subset in enumerate(subsets):
        values = [row[k] for row in per_replication if row[k] is not None]
        metrics = summarize_estimates(values, oracle.value, config.replications - len(values))
        results.append(
            SubsetConsistency(subset, metrics, oracle.value, oracle.standard_error, caliper_multiplier, design)
        )
        logger.info(
            f"Subset {subset or '()'} on {design}: bias {metrics.bias:+.4f} "
            f"(SE {metrics.bias_standard_error:.4f}, {metrics.failure_count} failures)"
        )
    return results
