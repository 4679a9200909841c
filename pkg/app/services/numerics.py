# app/services/numerics.py
"""
Deterministic regression kernels used by the matching and estimation services:
ordinary (optionally weighted) least squares, logistic regression by IRLS,
sample covariance and weighted moments.

All functions are pure; nothing here keeps state between calls.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.special import expit

from app.core.config import settings
from app.core.errors import (
    DimensionMismatch,
    NoVariation,
    RankDeficient,
    SchemaError,
    Separation,
    TooFewRows,
    TooFewUnits,
)
from app.core.logging import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True)
class DesignMatrix:
    """A real n x k matrix with one label per column."""

    values: np.ndarray
    column_labels: tuple[str, ...] = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(-1, 1)
        if values.ndim != 2:
            raise DimensionMismatch(f"Design matrix must be 2-D, got {values.ndim}-D")
        if not np.all(np.isfinite(values)):
            raise SchemaError("Design matrix contains non-finite entries")
        labels = tuple(self.column_labels) or tuple(f"c{j}" for j in range(values.shape[1]))
        if len(labels) != values.shape[1]:
            raise DimensionMismatch(
                f"{len(labels)} labels for {values.shape[1]} design columns"
            )
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "column_labels", labels)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def columns(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class FitResult:
    coefficients: np.ndarray
    residual_variance: float
    converged: bool
    iterations: int
    column_labels: tuple[str, ...] = field(default=())

    def coefficient(self, label: str) -> float:
        """Look up a coefficient by its design column label."""
        try:
            return float(self.coefficients[self.column_labels.index(label)])
        except ValueError:
            raise KeyError(f"No design column named {label!r}") from None


def _solve_least_squares(A: np.ndarray, b: np.ndarray, tol: float) -> np.ndarray:
    """Minimum-residual solution of A x ~ b via column-pivoted QR."""
    Q, R, piv = linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0 or diag[-1] <= tol * diag[0]:
        raise RankDeficient(
            f"Design is rank deficient (smallest pivot {diag[-1] if diag.size else 0.0:.3g})"
        )
    solution = linalg.solve_triangular(R, Q.T @ b)
    coefficients = np.empty_like(solution)
    coefficients[piv] = solution
    return coefficients


def _check_rank(X: np.ndarray, tol: float) -> None:
    R = linalg.qr(X, mode="r", pivoting=True)[0]
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0 or diag[-1] <= tol * diag[0]:
        raise RankDeficient("Design is rank deficient")


def _as_weights(weights: Optional[Sequence[float]], n: int) -> np.ndarray:
    if weights is None:
        return np.ones(n)
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (n,):
        raise DimensionMismatch(f"{weights.size} weights for {n} rows")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise SchemaError("Weights must be finite and non-negative")
    return weights


def fit_ols(
    design: DesignMatrix,
    y: Sequence[float],
    weights: Optional[Sequence[float]] = None,
    tol: Optional[float] = None,
) -> FitResult:
    """
    Fit (weighted) least squares.

    Args:
        design: Design matrix with full column rank
        y: Response, one value per design row
        weights: Optional non-negative observation weights
        tol: Singularity tolerance relative to the largest pivot

    Returns:
        FitResult whose residual_variance is RSS / (active rows - columns)
    """
    tol = settings.SINGULAR_TOL if tol is None else tol
    y = np.asarray(y, dtype=float)
    if y.shape != (design.rows,):
        raise DimensionMismatch(f"Response has {y.size} values for {design.rows} rows")
    w = _as_weights(weights, design.rows)
    n_active = int(np.count_nonzero(w))
    if n_active < design.columns:
        raise RankDeficient(
            f"{n_active} weighted rows cannot identify {design.columns} coefficients"
        )

    root_w = np.sqrt(w)
    A = design.values * root_w[:, np.newaxis]
    b = y * root_w
    coefficients = _solve_least_squares(A, b, tol)

    residuals = b - A @ coefficients
    rss = float(residuals @ residuals)
    dof = n_active - design.columns
    residual_variance = rss / dof if dof > 0 else 0.0
    return FitResult(
        coefficients=coefficients,
        residual_variance=max(residual_variance, 0.0),
        converged=True,
        iterations=1,
        column_labels=design.column_labels,
    )


def _log_likelihood(X: np.ndarray, w: np.ndarray, beta: np.ndarray) -> float:
    eta = X @ beta
    return float(np.sum(w * eta - np.logaddexp(0.0, eta)))


def fit_logistic(
    design: DesignMatrix,
    w: Sequence[int],
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
    separation_threshold: Optional[float] = None,
) -> FitResult:
    """
    Maximum-likelihood logit fit by iteratively reweighted least squares.

    Newton steps are halved while they decrease the log-likelihood. The fit is
    converged when the largest absolute score entry is at most ``tol``.
    """
    tol = settings.IRLS_TOL if tol is None else tol
    max_iter = settings.IRLS_MAX_ITER if max_iter is None else max_iter
    threshold = settings.SEPARATION_THRESHOLD if separation_threshold is None else separation_threshold

    w = np.asarray(w, dtype=float)
    if w.shape != (design.rows,):
        raise DimensionMismatch(f"Treatment vector has {w.size} values for {design.rows} rows")
    if not np.all((w == 0) | (w == 1)):
        raise SchemaError("Treatment vector must be binary")
    if w.min() == w.max():
        raise NoVariation("Treatment vector is constant")
    X = design.values
    if design.rows < design.columns:
        raise RankDeficient("Fewer rows than design columns")
    _check_rank(X, settings.SINGULAR_TOL)

    beta = np.zeros(design.columns)
    log_lik = _log_likelihood(X, w, beta)
    iterations = 0
    converged = False
    while True:
        p = expit(X @ beta)
        score = X.T @ (w - p)
        if np.max(np.abs(score)) <= tol:
            converged = True
            break
        if iterations >= max_iter:
            break

        information = (X * (p * (1.0 - p))[:, np.newaxis]).T @ X
        try:
            step = linalg.cho_solve(linalg.cho_factor(information), score)
        except linalg.LinAlgError:
            raise Separation("Information matrix collapsed; fitted probabilities hit 0/1") from None

        candidate = beta + step
        candidate_lik = _log_likelihood(X, w, candidate)
        halvings = 0
        while candidate_lik < log_lik and halvings < 30:
            step = step / 2.0
            candidate = beta + step
            candidate_lik = _log_likelihood(X, w, candidate)
            halvings += 1
        beta, log_lik = candidate, candidate_lik
        iterations += 1

        if np.max(np.abs(beta)) > threshold:
            raise Separation(
                f"Coefficient norm diverged past {threshold} after {iterations} iterations"
            )

    p = expit(X @ beta)
    if np.all(p[w == 1] > 1.0 - 1e-8) and np.all(p[w == 0] < 1e-8):
        raise Separation("Fitted probabilities are 0/1 for every unit")
    if not converged:
        logger.warning(f"IRLS stopped after {iterations} iterations without meeting tol={tol}")

    variance = p * (1.0 - p)
    dof = design.rows - design.columns
    dispersion = float(np.sum((w - p) ** 2 / variance) / dof) if dof > 0 else 0.0
    return FitResult(
        coefficients=beta,
        residual_variance=dispersion,
        converged=converged,
        iterations=iterations,
        column_labels=design.column_labels,
    )


def sample_covariance(X: np.ndarray) -> np.ndarray:
    """Symmetric p x p sample covariance with denominator rows - 1."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.shape[0] < 2:
        raise TooFewRows(f"Covariance needs at least 2 rows, got {X.shape[0]}")
    cov = np.atleast_2d(np.cov(X, rowvar=False, ddof=1))
    return (cov + cov.T) / 2.0


def weighted_mean(x: np.ndarray, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Column means of x under normalized weights."""
    x = np.asarray(x, dtype=float)
    if weights is None:
        return x.mean(axis=0)
    weights = np.asarray(weights, dtype=float)
    total = weights.sum()
    if total <= 0:
        raise TooFewUnits("Weights sum to zero")
    return np.tensordot(weights / total, x, axes=(0, 0))


def weighted_variance(x: np.ndarray, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Column variances with the reliability-weights correction.

    With unit weights this is the usual sample variance (ddof=1).
    """
    x = np.asarray(x, dtype=float)
    if weights is None:
        weights = np.ones(x.shape[0])
    weights = np.asarray(weights, dtype=float)
    v1 = weights.sum()
    if v1 <= 0:
        raise TooFewUnits("Weights sum to zero")
    v2 = float(np.sum(weights**2))
    denominator = v1 - v2 / v1
    if denominator <= 0:
        raise TooFewUnits("Weighted variance needs at least two positively weighted units")
    mean = weighted_mean(x, weights)
    centered = x - mean
    return np.tensordot(weights, centered**2, axes=(0, 0)) / denominator
