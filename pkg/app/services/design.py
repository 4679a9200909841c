# app/services/design.py
"""Named regression terms and design-matrix assembly."""

from collections import Counter
from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Iterable, Optional, Sequence

import numpy as np

from app.core.errors import DimensionMismatch, InvalidParameter
from app.services.numerics import DesignMatrix

INTERCEPT = "(Intercept)"
TREATMENT = "W"


def covariate_name(index: int) -> str:
    return f"x{index + 1}"


@dataclass(frozen=True, order=True)
class Term:
    """
    Product of covariate columns, optionally multiplied by the treatment.

    ``columns`` is a sorted multiset of 0-based covariate indices: (0,) is x1,
    (0, 0) is x1^2, (0, 1) is x1:x2. ``treated`` multiplies the product by W.
    """

    columns: tuple[int, ...]
    treated: bool = False

    def __post_init__(self):
        if not self.columns:
            raise InvalidParameter("A term needs at least one covariate column")
        if min(self.columns) < 0:
            raise InvalidParameter(f"Negative covariate index in {self.columns}")
        object.__setattr__(self, "columns", tuple(sorted(self.columns)))

    @classmethod
    def linear(cls, j: int) -> "Term":
        return cls((j,))

    @classmethod
    def square(cls, j: int) -> "Term":
        return cls((j, j))

    @classmethod
    def cube(cls, j: int) -> "Term":
        return cls((j, j, j))

    @classmethod
    def product(cls, i: int, j: int) -> "Term":
        return cls((i, j))

    @classmethod
    def treatment_interaction(cls, j: int) -> "Term":
        return cls((j,), treated=True)

    @property
    def degree(self) -> int:
        return len(self.columns)

    @property
    def label(self) -> str:
        parts = []
        for j, power in sorted(Counter(self.columns).items()):
            name = covariate_name(j)
            parts.append(name if power == 1 else f"{name}^{power}")
        body = ":".join(parts)
        return f"{TREATMENT}:{body}" if self.treated else body

    def evaluate(self, X: np.ndarray, W: Optional[np.ndarray] = None) -> np.ndarray:
        if max(self.columns) >= X.shape[1]:
            raise DimensionMismatch(f"Term {self.label} needs {max(self.columns) + 1} covariates")
        values = np.prod(X[:, list(self.columns)], axis=1)
        if self.treated:
            if W is None:
                raise DimensionMismatch(f"Term {self.label} needs the treatment vector")
            values = values * W
        return values


def linear_terms(columns: Iterable[int]) -> tuple[Term, ...]:
    return tuple(Term.linear(j) for j in columns)


def monomial_pool(p: int, max_degree: int = 3) -> tuple[Term, ...]:
    """Every monomial of degree 1..max_degree in p covariates."""
    pool = []
    for degree in range(1, max_degree + 1):
        pool.extend(Term(c) for c in combinations_with_replacement(range(p), degree))
    return tuple(pool)


def build_design(
    X: np.ndarray,
    terms: Sequence[Term],
    W: Optional[np.ndarray] = None,
    include_treatment: bool = False,
    intercept: bool = True,
) -> DesignMatrix:
    """
    Assemble [1, W, terms...] as a DesignMatrix.

    Args:
        X: n x p covariate matrix
        terms: Covariate terms, in column order
        W: Treatment vector, needed when include_treatment or any term is treated
        include_treatment: Put W right after the intercept
        intercept: Lead with a column of ones

    Returns:
        DesignMatrix with labels "(Intercept)", "W", then each term label
    """
    X = np.asarray(X, dtype=float)
    columns = []
    labels = []
    if intercept:
        columns.append(np.ones(X.shape[0]))
        labels.append(INTERCEPT)
    if include_treatment:
        if W is None:
            raise DimensionMismatch("Treatment column requested without a treatment vector")
        columns.append(np.asarray(W, dtype=float))
        labels.append(TREATMENT)
    for term in terms:
        columns.append(term.evaluate(X, W))
        labels.append(term.label)
    if not columns:
        raise InvalidParameter("Design has no columns")
    return DesignMatrix(np.column_stack(columns), tuple(labels))


def describe_terms(terms: Sequence[Term], intercept: bool = True) -> str:
    """Formula-style description, e.g. '1 + x1 + x2 + x1^2'."""
    parts = (["1"] if intercept else []) + [t.label for t in terms]
    return " + ".join(parts) if parts else "0"
