# app/services/experiments.py
"""
Desk-scale reproductions of the simulation findings.

Each check runs one of the shipped scenarios (or a small variant of it), reduces
the output to a handful of statistics and reports whether the expected pattern
showed up. Orderings across coefficient pairs use a one-sided sign test;
trends over sample size use an ordinary regression slope.
"""

import math
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import binomtest, linregress

from app.core.config import SCENARIO_DIR
from app.core.errors import InvalidParameter, MatchingLabError
from app.core.logging import get_logger
from app.services.balance import average_pairwise_mahalanobis, cross_replication_imbalance, smd
from app.services.cem import CoarseningMatcher, CoarseningSpec, Cutpoints, coarsen, cem_match, sturges_bin_count
from app.services.datagen import Dataset, draw_dataset
from app.services.estimators import (
    EfficiencyInputs,
    ModelSpec,
    estimate,
    random_covariate_subsets,
    relative_efficiency,
    relative_efficiency_inputs,
    verify_matched_consistency,
)
from app.services.matching import run_scenario_design
from app.services.parallel import parallel_map
from app.services.scenario import (
    CEM_AUTO,
    CEM_K3,
    LINEAR,
    PATT_MATCHED,
    PATT_SOURCE,
    PSM,
    UNADJUSTED,
    UNMATCHED,
    ScenarioConfig,
    load_scenario_config,
)
from app.services.simulation import simulate

logger = get_logger(__name__)

SIGN_TEST_LEVEL = 0.01
SLOPE_TEST_LEVEL = 0.05


@dataclass(frozen=True)
class Reproduction:
    name: str
    passed: bool
    statistics: dict[str, float] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {"check": self.name, "statistic": key, "value": value, "passed": self.passed}
                for key, value in self.statistics.items()
            ],
            columns=["check", "statistic", "value", "passed"],
        )


def shipped_scenario(name: str) -> ScenarioConfig:
    return load_scenario_config(SCENARIO_DIR / f"{name}.env")


def sign_test(smaller: np.ndarray, larger: np.ndarray) -> tuple[int, int, float]:
    """
    One-sided sign test that ``smaller`` tends to be below ``larger``.

    Returns:
        (successes, non-tied trials, p-value); ties are dropped
    """
    smaller = np.asarray(smaller, dtype=float)
    larger = np.asarray(larger, dtype=float)
    keep = np.isfinite(smaller) & np.isfinite(larger) & (smaller != larger)
    trials = int(keep.sum())
    if trials == 0:
        return 0, 0, 1.0
    successes = int(np.count_nonzero(smaller[keep] < larger[keep]))
    return successes, trials, float(binomtest(successes, trials, 0.5, alternative="greater").pvalue)


def _abs_bias_by_pair(aggregate: pd.DataFrame, estimator: str) -> pd.DataFrame:
    rows = aggregate[aggregate["Model"] == estimator]
    return rows.pivot(index="Pair", columns="Design", values="Bias").abs()


def _ordering(table: pd.DataFrame, designs: Sequence[str], statistics: dict) -> bool:
    """Median and sign-test ordering of consecutive designs; fills ``statistics``."""
    passed = True
    for design in designs:
        statistics[f"median_abs_bias[{design}]"] = float(table[design].median())
    for lower, upper in zip(designs, designs[1:]):
        successes, trials, pvalue = sign_test(table[lower].to_numpy(), table[upper].to_numpy())
        statistics[f"sign_test[{lower}<{upper}].successes"] = successes
        statistics[f"sign_test[{lower}<{upper}].trials"] = trials
        statistics[f"sign_test[{lower}<{upper}].pvalue"] = pvalue
        passed &= pvalue < SIGN_TEST_LEVEL and table[lower].median() < table[upper].median()
    return bool(passed)


def check_anchors(workers: int = 1) -> Reproduction:
    """Closed-form values every implementation must hit exactly."""
    statistics: dict[str, float] = {}
    statistics["sturges_300"] = sturges_bin_count(300)
    statistics["smd"] = smd(np.array([1.0, 2.0, 3.0]), np.array([2.0, 3.0, 4.0]))
    statistics["pairwise_mahalanobis"] = average_pairwise_mahalanobis(
        np.array([[0.0, 0.0], [3.0, 4.0]]), np.array([[1, 0]]), np.eye(2)
    )
    # two strata: (1 treated, 2 controls) each, so m_T=2 and m_C=4
    data = Dataset(np.array([-1.0, -1.0, -1.0, 1.0, 1.0, 1.0]), np.array([1, 0, 0, 1, 0, 0]), np.zeros(6))
    match = cem_match(data, coarsen(data, CoarseningSpec.uniform(Cutpoints((0.0,)))))
    statistics["cem_control_weight"] = float(match.weights[1])
    statistics["cross_replication"] = cross_replication_imbalance(np.array([[0.5], [-0.5]])).imbalance
    statistics["relative_efficiency"] = relative_efficiency(
        EfficiencyInputs(1.0, np.array([1.0, 0.0]), np.array([1.0, 0.0]), np.eye(2), 100, 100)
    )
    expected = {
        "sturges_300": 10,
        "smd": -1.0,
        "pairwise_mahalanobis": 5.0,
        "cem_control_weight": 1.0,
        "cross_replication": 0.0,
        "relative_efficiency": 1.0,
    }
    passed = all(math.isclose(statistics[k], v, abs_tol=1e-12) for k, v in expected.items())
    return Reproduction("anchors", passed, statistics)


def _treated_fraction(replication_index: int, config: ScenarioConfig) -> float:
    data = draw_dataset(config, replication_index)
    return data.treated_count / data.n


def check_prevalence(workers: int = 1, replications: int = 200) -> Reproduction:
    """Linear five-covariate scenario: about 30% of units treated."""
    config = shipped_scenario("linear5")
    fractions = np.asarray(parallel_map(partial(_treated_fraction, config=config), range(replications), workers))
    mean = float(fractions.mean())
    statistics = {"mean_treated_fraction": mean, "sd_treated_fraction": float(fractions.std(ddof=1))}
    return Reproduction("prevalence", 0.28 <= mean <= 0.32, statistics)


def check_matched_consistency(
    workers: int = 1, replications: int = 1000, subset_count: int = 8, n: int = 5000
) -> Reproduction:
    """
    Tight-caliper PSM: every covariate subset estimates the effect without bias,
    and the bias does not grow when the sample doubles.
    """
    config = shipped_scenario("linear5")
    subsets = random_covariate_subsets(config.p, subset_count, seed=config.seed)
    base = verify_matched_consistency(config, subsets, n=n, replications=replications, workers=workers)
    doubled = verify_matched_consistency(config, subsets, n=2 * n, replications=replications, workers=workers)

    statistics: dict[str, float] = {}
    passed = True
    for small, large in zip(base, doubled):
        name = ",".join(f"x{j + 1}" for j in small.subset) or "none"
        combined_se = math.hypot(small.metrics.bias_standard_error, large.metrics.bias_standard_error)
        statistics[f"bias[{name}]"] = small.metrics.bias
        statistics[f"bias_doubled[{name}]"] = large.metrics.bias
        passed &= abs(small.metrics.bias) < 0.03
        passed &= abs(large.metrics.bias) <= abs(small.metrics.bias) + 2 * combined_se
    statistics["true_value"] = base[0].true_value
    return Reproduction("matched_consistency", bool(passed), statistics)


def check_unadjusted_bias_ordering(workers: int = 1, replications: int = 200, pairs: int = 50) -> Reproduction:
    """Across coefficient pairs, |bias| of the difference in means: PSM < CEM-Auto < CEM-K3."""
    designs = [PSM, CEM_AUTO, CEM_K3]
    config = shipped_scenario("linear5-pairs").with_overrides(
        designs=designs, estimators=[UNADJUSTED], replications=replications, coefficient_pairs=pairs
    )
    results = simulate(config, workers)
    statistics: dict[str, float] = {}
    passed = _ordering(_abs_bias_by_pair(results.aggregate, UNADJUSTED), designs, statistics)
    return Reproduction("unadjusted_bias_ordering", passed, statistics)


def _slope_not_negative(n: np.ndarray, values: np.ndarray) -> tuple[float, float, bool]:
    fit = linregress(n, values, alternative="less")
    return float(fit.slope), float(fit.pvalue), bool(fit.pvalue >= SLOPE_TEST_LEVEL)


def check_imbalance_persistence(workers: int = 1, replications: int = 200) -> Reproduction:
    """
    Cross-replication imbalance is ordered PSM < CEM-Auto < CEM-K3 and, for the
    coarsened designs, does not shrink with sample size while PSM's does.
    """
    config = shipped_scenario("linear5-sizes").with_overrides(replications=replications)
    imbalance = simulate(config, workers).imbalance
    statistics: dict[str, float] = {}

    def series(design: str, metric: str) -> pd.Series:
        rows = imbalance[(imbalance["design"] == design) & (imbalance["metric"] == metric)]
        return rows.set_index("n")["value"].astype(float).sort_index()

    passed = True
    at_5000 = [series(d, "cross_replication").get(5000, math.nan) for d in (PSM, CEM_AUTO, CEM_K3)]
    for design, value in zip((PSM, CEM_AUTO, CEM_K3), at_5000):
        statistics[f"cross_replication_5000[{design}]"] = value
    passed &= at_5000[0] < at_5000[1] < at_5000[2]

    for design in (CEM_AUTO, CEM_K3):
        for metric in ("cross_replication", "group_mahalanobis"):
            values = series(design, metric)
            slope, pvalue, flat = _slope_not_negative(values.index.to_numpy(dtype=float), values.to_numpy())
            statistics[f"slope[{design},{metric}]"] = slope
            statistics[f"slope_pvalue[{design},{metric}]"] = pvalue
            passed &= flat

    psm = series(PSM, "cross_replication")
    ratio = float(psm.iloc[-1] / psm.iloc[0]) if len(psm) > 1 and psm.iloc[0] > 0 else math.nan
    statistics["psm_cross_replication_ratio"] = ratio
    passed &= ratio <= 0.5
    return Reproduction("imbalance_persistence", bool(passed), statistics)


def check_model_dependence(workers: int = 1, replications: int = 200, pairs: int = 50) -> Reproduction:
    """
    Misspecified linear adjustment under the nonlinear DGP: PSM < CEM-Auto < Unmatched
    in |bias|. Correct linear adjustment under the linear DGP: small bias for both designs.
    """
    designs = [PSM, CEM_AUTO, UNMATCHED]
    nonlinear = shipped_scenario("nonlinear5-pairs").with_overrides(
        designs=designs, estimators=[LINEAR], replications=replications, coefficient_pairs=pairs
    )
    statistics: dict[str, float] = {}
    passed = _ordering(_abs_bias_by_pair(simulate(nonlinear, workers).aggregate, LINEAR), designs, statistics)

    linear = shipped_scenario("linear5-pairs").with_overrides(
        designs=[PSM, CEM_AUTO], estimators=[LINEAR], replications=replications, coefficient_pairs=pairs
    )
    correct = _abs_bias_by_pair(simulate(linear, workers).aggregate, LINEAR)
    for design in (PSM, CEM_AUTO):
        median = float(correct[design].median())
        statistics[f"correct_model_median_abs_bias[{design}]"] = median
        passed &= median < 0.05
    return Reproduction("model_dependence", bool(passed), statistics)


def _errors_by_replication(replications: pd.DataFrame, estimator: str, true_value: float) -> pd.DataFrame:
    rows = replications[(replications["estimator"] == estimator) & (replications["failure"] == "")]
    return (rows.pivot(index="replication", columns="design", values="estimate") - true_value).abs()


def check_dimensionality(workers: int = 1, replications: int = 200) -> Reproduction:
    """
    Seven covariates: CEM-Auto prunes most treated units and loses precision,
    and CEM-K3 with a misspecified model is worse than PSM on every error measure.
    """
    statistics: dict[str, float] = {}
    passed = True

    linear = shipped_scenario("linear7").with_overrides(
        designs=[PSM, CEM_AUTO], estimators=[LINEAR], replications=replications
    )
    results = simulate(linear, workers)
    cem_samples = results.samples[results.samples["design"] == CEM_AUTO]
    retained = float((cem_samples["matched_treated"] / cem_samples["m_T"]).mean()) if len(cem_samples) else 0.0
    statistics["cem_auto_retained_treated_share"] = retained
    passed &= retained < 0.2
    sd = results.aggregate.set_index("Design")["SD"]
    variance_ratio = float(sd[CEM_AUTO] ** 2 / sd[PSM] ** 2)
    statistics["variance_ratio[CEM-Auto/PSM]"] = variance_ratio
    passed &= variance_ratio >= 2.0

    nonlinear = shipped_scenario("nonlinear7").with_overrides(
        designs=[PSM, CEM_K3], estimators=[LINEAR], replications=replications
    )
    results = simulate(nonlinear, workers)
    table = results.aggregate.set_index("Design")
    for column, label in (("Bias", "abs_bias"), ("SD", "variance"), ("MSE", "mse")):
        psm_value, cem_value = table.loc[PSM, column], table.loc[CEM_K3, column]
        if column == "Bias":
            psm_value, cem_value = abs(psm_value), abs(cem_value)
        elif column == "SD":
            psm_value, cem_value = psm_value**2, cem_value**2
        statistics[f"{label}[{PSM}]"] = float(psm_value)
        statistics[f"{label}[{CEM_K3}]"] = float(cem_value)
        passed &= cem_value > psm_value
    errors = _errors_by_replication(results.replications, LINEAR, float(table.loc[PSM, "True Value"])).dropna()
    share = float((errors[CEM_K3] > errors[PSM]).mean()) if len(errors) else 0.0
    statistics["share_replications_cem_k3_worse"] = share
    passed &= share >= 0.8
    return Reproduction("dimensionality", bool(passed), statistics)


def check_heterogeneous_effects(workers: int = 1, replications: int = 200) -> Reproduction:
    """
    Effect varies with x1. With the outcome model right, the PATT that averages
    the modifiers over every source treated unit is nearly unbiased for PSM and
    CEM-Auto while the difference in means is not; with it wrong, that PATT's
    bias is ordered PSM < CEM-Auto < CEM-K3. The matched-treated variant is
    reported alongside.
    """
    designs = [PSM, CEM_AUTO, CEM_K3]
    statistics: dict[str, float] = {}
    passed = True

    correct = shipped_scenario("hetero30-linear").with_overrides(
        designs=designs, estimators=[UNADJUSTED, PATT_SOURCE, PATT_MATCHED], replications=replications
    )
    table = simulate(correct, workers).aggregate.set_index(["Design", "Model"])["Bias"].abs()
    for design in designs:
        for estimator in (UNADJUSTED, PATT_SOURCE, PATT_MATCHED):
            statistics[f"abs_bias[{design},{estimator}]"] = float(table[(design, estimator)])
        passed &= table[(design, UNADJUSTED)] > 0.05
    for design in (PSM, CEM_AUTO):
        passed &= table[(design, PATT_SOURCE)] < 0.02

    misspecified = shipped_scenario("hetero30-nonlinear").with_overrides(
        designs=designs, estimators=[PATT_SOURCE, PATT_MATCHED], replications=replications
    )
    table = simulate(misspecified, workers).aggregate.set_index(["Design", "Model"])["Bias"].abs()
    for design in designs:
        statistics[f"misspecified_abs_bias[{design},{PATT_SOURCE}]"] = float(table[(design, PATT_SOURCE)])
        statistics[f"misspecified_abs_bias[{design},{PATT_MATCHED}]"] = float(table[(design, PATT_MATCHED)])
    passed &= table[(PSM, PATT_SOURCE)] < table[(CEM_AUTO, PATT_SOURCE)] < table[(CEM_K3, PATT_SOURCE)]
    return Reproduction("heterogeneous_effects", bool(passed), statistics)


def _efficiency_replication(replication_index: int, config: ScenarioConfig) -> Optional[tuple[float, float, float]]:
    try:
        data = draw_dataset(config, replication_index)
        psm = run_scenario_design(data, PSM, config)[0]
        exact = CoarseningMatcher(CoarseningSpec.auto(), "one_to_one").match(data)[0]
        psm_estimate = estimate(psm, data, ModelSpec.unadjusted()).point_estimate
        exact_estimate = estimate(exact, data, ModelSpec.unadjusted()).point_estimate
        predicted = relative_efficiency(relative_efficiency_inputs(config, data, psm, exact))
    except MatchingLabError as e:
        logger.warning(f"Replication {replication_index}: {e}")
        return None
    return psm_estimate, exact_estimate, predicted


def check_relative_efficiency(workers: int = 1, replications: int = 500, n: int = 2000) -> Reproduction:
    """
    Two orthogonal covariate directions, so PSM pairs are mismatched on the outcome
    surface: the variance ratio of the difference in means (CEM 1:1 over PSM)
    should track the predicted relative efficiency.
    """
    config = shipped_scenario("linear2").with_overrides(n=n, replications=replications)
    outputs = parallel_map(partial(_efficiency_replication, config=config), range(replications), workers)
    rows = np.array([row for row in outputs if row is not None], dtype=float).reshape(-1, 3)
    if rows.shape[0] < 2:
        raise InvalidParameter("Too few successful replications to compare variances")
    empirical = float(np.var(rows[:, 1], ddof=1) / np.var(rows[:, 0], ddof=1))
    predicted = float(rows[:, 2].mean())
    relative_error = abs(empirical / predicted - 1.0)
    statistics = {
        "empirical_variance_ratio": empirical,
        "predicted_relative_efficiency": predicted,
        "relative_error": relative_error,
        "replications": float(rows.shape[0]),
    }
    return Reproduction("relative_efficiency", relative_error < 0.25, statistics)


def check_determinism(
    workers: int = 1, worker_counts: Sequence[int] = (1, 4, 8), replications: int = 20
) -> Reproduction:
    """The aggregate table is byte-identical for every worker count."""
    config = shipped_scenario("linear5").with_overrides(n=1000, replications=replications)
    texts = [simulate(config, count).aggregate.to_csv(index=False, lineterminator="\n") for count in worker_counts]
    identical = all(text == texts[0] for text in texts[1:])
    statistics = {f"bytes[workers={count}]": float(len(text)) for count, text in zip(worker_counts, texts)}
    return Reproduction("determinism", identical, statistics)


REPRODUCTIONS: dict[str, Callable[..., Reproduction]] = {
    "anchors": check_anchors,
    "prevalence": check_prevalence,
    "matched_consistency": check_matched_consistency,
    "unadjusted_bias_ordering": check_unadjusted_bias_ordering,
    "imbalance_persistence": check_imbalance_persistence,
    "model_dependence": check_model_dependence,
    "dimensionality": check_dimensionality,
    "heterogeneous_effects": check_heterogeneous_effects,
    "relative_efficiency": check_relative_efficiency,
    "determinism": check_determinism,
}


def run_reproductions(
    names: Sequence[str], workers: int = 1, output_path: Optional[str | Path] = None
) -> list[Reproduction]:
    """
    Run the named checks in order and optionally write a long results table.

    Args:
        names: Keys of REPRODUCTIONS
        workers: Worker processes for the simulations
        output_path: CSV path for check, statistic, value, passed

    Returns:
        One Reproduction per name
    """
    unknown = [name for name in names if name not in REPRODUCTIONS]
    if unknown:
        raise InvalidParameter(f"Unknown reproductions {unknown}; choose from {', '.join(REPRODUCTIONS)}")
    results = []
    for name in names:
        logger.info(f"Running reproduction {name}")
        result = REPRODUCTIONS[name](workers=workers)
        logger.info(f"Reproduction {name}: {'passed' if result.passed else 'FAILED'}")
        results.append(result)
    if output_path is not None:
        output_path = Path(output_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        pd.concat([r.to_frame() for r in results], ignore_index=True).to_csv(
            output_path, index=False, lineterminator="\n"
        )
    return results
