# app/services/balance.py
"""
Covariate balance diagnostics for matched (or unmatched) samples.

Single-sample metrics:
    smd                   signed standardized mean difference per covariate
    pairwise_mahalanobis  mean Mahalanobis distance from each treated unit to its match
    group_mahalanobis     Mahalanobis distance between the group mean vectors
    abs_mean_diff         sum over covariates of |treated mean - control mean|
    l1_histogram          L1 distance between the groups' multivariate histograms

Across replications the signed SMDs are averaged per covariate before taking
absolute values, so chance imbalance cancels and systematic imbalance does not.
"""

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.spatial.distance import cdist

from app.core.errors import (
    DimensionMismatch,
    EmptyMatch,
    SingularCovariance,
    TooFewUnits,
    ZeroVariance,
)
from app.core.logging import get_logger
from app.services.cem import CoarseningSpec, coarsen_matrix
from app.services.datagen import Dataset
from app.services.design import covariate_name
from app.services.match_result import MatchResult
from app.services.numerics import sample_covariance, weighted_mean, weighted_variance
from app.services.scenario import BALANCE_METRICS

logger = get_logger(__name__)

# rows of treated units per cdist block when searching nearest controls
_NEAREST_BLOCK = 512


def smd(
    treated_values: np.ndarray,
    control_values: np.ndarray,
    treated_weights: Optional[np.ndarray] = None,
    control_weights: Optional[np.ndarray] = None,
) -> float:
    """
    Signed standardized mean difference of one covariate.

    The denominator is sqrt((S1^2 + S0^2) / 2) with (weighted) sample variances.
    Equal groups with zero variance give 0; unequal means with zero variance raise.
    """
    treated_values = np.asarray(treated_values, dtype=float)
    control_values = np.asarray(control_values, dtype=float)
    if treated_values.size < 2 or control_values.size < 2:
        raise TooFewUnits("SMD needs at least two units per group")
    mean_t = float(weighted_mean(treated_values, treated_weights))
    mean_c = float(weighted_mean(control_values, control_weights))
    pooled = np.sqrt(
        (float(weighted_variance(treated_values, treated_weights)) + float(weighted_variance(control_values, control_weights)))
        / 2.0
    )
    if pooled == 0.0:
        if mean_t == mean_c:
            return 0.0
        raise ZeroVariance(f"Both groups are constant but means differ ({mean_t} vs {mean_c})")
    return (mean_t - mean_c) / pooled


def _groups(X: np.ndarray, W: np.ndarray, weights: Optional[np.ndarray]):
    X = np.asarray(X, dtype=float)
    W = np.asarray(W)
    weights = np.ones(W.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    if X.shape[0] != W.shape[0] or weights.shape != W.shape:
        raise DimensionMismatch("X, W and weights must have the same number of rows")
    treated = (W == 1) & (weights > 0)
    control = (W == 0) & (weights > 0)
    if not treated.any() or not control.any():
        raise EmptyMatch("Balance needs at least one retained unit in each group")
    return X, treated, control, weights


def smd_vector(X: np.ndarray, W: np.ndarray, weights: Optional[np.ndarray] = None) -> np.ndarray:
    X, treated, control, weights = _groups(X, W, weights)
    return np.array(
        [
            smd(X[treated, j], X[control, j], weights[treated], weights[control])
            for j in range(X.shape[1])
        ]
    )


def _mean_difference(X: np.ndarray, W: np.ndarray, weights: Optional[np.ndarray]) -> np.ndarray:
    X, treated, control, weights = _groups(X, W, weights)
    return weighted_mean(X[treated], weights[treated]) - weighted_mean(X[control], weights[control])


def inverse_covariance(covariance: np.ndarray) -> np.ndarray:
    covariance = np.atleast_2d(np.asarray(covariance, dtype=float))
    if covariance.shape[0] != covariance.shape[1]:
        raise DimensionMismatch(f"Covariance must be square, got {covariance.shape}")
    try:
        factor = linalg.cho_factor(covariance)
    except linalg.LinAlgError:
        raise SingularCovariance("Covariance matrix is not positive definite") from None
    if np.min(np.abs(np.diag(factor[0]))) <= 1e-12 * np.max(np.abs(np.diag(factor[0]))):
        raise SingularCovariance("Covariance matrix is numerically singular")
    precision = linalg.cho_solve(factor, np.eye(covariance.shape[0]))
    return (precision + precision.T) / 2.0


def average_pairwise_mahalanobis(X: np.ndarray, pairs: np.ndarray, covariance: np.ndarray) -> float:
    """Mean Mahalanobis distance between the members of each (treated, control) pair."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.shape[0] == 0:
        raise EmptyMatch("Pairwise Mahalanobis distance needs at least one pair")
    X = np.asarray(X, dtype=float)
    precision = inverse_covariance(covariance)
    difference = X[pairs[:, 0]] - X[pairs[:, 1]]
    squared = np.einsum("ij,jk,ik->i", difference, precision, difference)
    return float(np.mean(np.sqrt(np.maximum(squared, 0.0))))


def nearest_control_mahalanobis(
    X: np.ndarray, W: np.ndarray, weights: Optional[np.ndarray], covariance: np.ndarray
) -> float:
    """Mean distance from each retained treated unit to its closest retained control."""
    X, treated, control, _ = _groups(X, W, weights)
    precision = inverse_covariance(covariance)
    X_t, X_c = X[treated], X[control]
    closest = np.empty(X_t.shape[0])
    for start in range(0, X_t.shape[0], _NEAREST_BLOCK):
        block = cdist(X_t[start : start + _NEAREST_BLOCK], X_c, metric="mahalanobis", VI=precision)
        closest[start : start + _NEAREST_BLOCK] = block.min(axis=1)
    return float(closest.mean())


def between_group_mahalanobis(
    X: np.ndarray, W: np.ndarray, weights: Optional[np.ndarray], covariance: np.ndarray
) -> float:
    difference = _mean_difference(X, W, weights)
    precision = inverse_covariance(covariance)
    return float(np.sqrt(max(float(difference @ precision @ difference), 0.0)))


def absolute_mean_difference(X: np.ndarray, W: np.ndarray, weights: Optional[np.ndarray] = None) -> float:
    return float(np.sum(np.abs(_mean_difference(X, W, weights))))


def histogram_l1(
    cells: np.ndarray, W: np.ndarray, weights: Optional[np.ndarray] = None
) -> float:
    """L1 distance between the treated and control relative frequencies over cells."""
    cells = np.asarray(cells)
    if cells.ndim == 1:
        cells = cells.reshape(-1, 1)
    _, treated, control, weights = _groups(cells, W, weights)
    _, inverse = np.unique(cells, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    size = int(inverse.max()) + 1
    f = np.bincount(inverse[treated], weights=weights[treated], minlength=size)
    g = np.bincount(inverse[control], weights=weights[control], minlength=size)
    return float(np.sum(np.abs(f / f.sum() - g / g.sum())))


def l1_histogram_imbalance(
    X: np.ndarray,
    W: np.ndarray,
    weights: Optional[np.ndarray] = None,
    bins: Optional[CoarseningSpec] = None,
) -> float:
    """
    Histogram L1 imbalance with cells from ``bins`` (Sturges per covariate by default).

    The cells are built over every row of X, so the same grid is used before and
    after matching.
    """
    bins = CoarseningSpec.auto() if bins is None else bins
    return histogram_l1(coarsen_matrix(X, bins).C, W, weights)


@dataclass(frozen=True)
class CrossReplicationBalance:
    mean_smd_per_covariate: np.ndarray
    imbalance: float
    replication_count: int


def cross_replication_imbalance(per_replication_smds: np.ndarray) -> CrossReplicationBalance:
    """Average the signed SMDs over replications, then sum their absolute values."""
    smds = np.atleast_2d(np.asarray(per_replication_smds, dtype=float))
    if smds.shape[0] < 1:
        raise TooFewUnits("Cross-replication imbalance needs at least one replication")
    means = smds.mean(axis=0)
    return CrossReplicationBalance(means, float(np.sum(np.abs(means))), smds.shape[0])


@dataclass(frozen=True)
class BalanceReport:
    """
    Balance of one sample under one set of match weights. Metrics that were not
    requested are None.
    """

    smd: Optional[np.ndarray]
    pairwise_mahalanobis: Optional[float]
    group_mahalanobis: Optional[float]
    abs_mean_diff: Optional[float]
    l1_histogram: Optional[float]
    covariance_used: np.ndarray
    histogram_bins: str

    def to_long(self, covariate_names: Optional[Sequence[str]] = None) -> pd.DataFrame:
        """Long table with columns metric, covariate, value."""
        rows = []
        if self.smd is not None:
            names = covariate_names or [covariate_name(j) for j in range(self.smd.size)]
            rows.extend({"metric": "smd", "covariate": name, "value": float(v)} for name, v in zip(names, self.smd))
        for metric in BALANCE_METRICS[1:]:
            value = getattr(self, metric)
            if value is not None:
                rows.append({"metric": metric, "covariate": "", "value": float(value)})
        return pd.DataFrame(rows, columns=["metric", "covariate", "value"])


def _covariance(data: Dataset, match: Optional[MatchResult], source: str) -> np.ndarray:
    if source == "matched" and match is not None:
        return sample_covariance(data.X[match.retained_mask])
    return sample_covariance(data.X)


def balance_report(
    data: Dataset,
    match: Optional[MatchResult] = None,
    covariance: Optional[np.ndarray] = None,
    covariance_source: str = "original",
    histogram_bins: Optional[CoarseningSpec] = None,
    metrics: Iterable[str] = BALANCE_METRICS,
) -> BalanceReport:
    """
    Compute the requested single-sample balance metrics.

    Args:
        data: Source sample
        match: Match weights to apply; every unit at weight 1 when None
        covariance: Sigma for the Mahalanobis metrics; computed when None
        covariance_source: "original" (pre-match sample) or "matched" (retained units)
        histogram_bins: Cells for the histogram metric, Sturges by default
        metrics: Subset of BALANCE_METRICS

    Returns:
        BalanceReport
    """
    metrics = set(metrics)
    match = MatchResult.unmatched(data.W) if match is None else match
    weights = match.weights
    histogram_bins = CoarseningSpec.auto() if histogram_bins is None else histogram_bins
    needs_covariance = metrics & {"pairwise_mahalanobis", "group_mahalanobis"}
    if covariance is None:
        covariance = _covariance(data, match, covariance_source) if needs_covariance else np.empty((0, 0))

    pairwise = None
    if "pairwise_mahalanobis" in metrics:
        if match.pair_count:
            pairwise = average_pairwise_mahalanobis(data.X, match.pairs, covariance)
        else:
            pairwise = nearest_control_mahalanobis(data.X, data.W, weights, covariance)

    return BalanceReport(
        smd=smd_vector(data.X, data.W, weights) if "smd" in metrics else None,
        pairwise_mahalanobis=pairwise,
        group_mahalanobis=(
            between_group_mahalanobis(data.X, data.W, weights, covariance) if "group_mahalanobis" in metrics else None
        ),
        abs_mean_diff=absolute_mean_difference(data.X, data.W, weights) if "abs_mean_diff" in metrics else None,
        l1_histogram=(
            l1_histogram_imbalance(data.X, data.W, weights, histogram_bins) if "l1_histogram" in metrics else None
        ),
        covariance_used=np.asarray(covariance),
        histogram_bins=",".join(sorted({r.label for r in histogram_bins.rules})),
    )


def balance_comparison(data: Dataset, match: MatchResult, **kwargs) -> pd.DataFrame:
    """Before/after table: metric, covariate, before, after."""
    before = balance_report(data, None, **kwargs).to_long(data.covariate_names)
    after = balance_report(data, match, **kwargs).to_long(data.covariate_names)
    table = before.rename(columns={"value": "before"})
    table["after"] = after["value"].to_numpy()
    return table
