# app/services/cem.py
"""
Coarsened exact matching: bin every covariate, match exactly on the bin tuple,
weight or pair units inside the retained strata.
"""

import math
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd
from sklearn.metrics import pairwise_distances
from sklearn.preprocessing import StandardScaler

from app.core.errors import DimensionMismatch, EmptyMatch, InvalidParameter
from app.core.logging import get_logger
from app.services.datagen import Dataset
from app.services.design import covariate_name
from app.services.match_result import DESIGN_CEM_ONE_TO_ONE, DESIGN_CEM_WEIGHTS, MatchResult

logger = get_logger(__name__)


@dataclass(frozen=True)
class AutoSturges:
    """Equal-width bins, ceil(log2(n) + 1) of them, n being the pooled sample size."""

    @property
    def label(self) -> str:
        return "auto"


@dataclass(frozen=True)
class FixedK:
    """k equal-width bins over the observed range."""

    k: int

    def __post_init__(self):
        if self.k < 2:
            raise InvalidParameter(f"FixedK needs k >= 2, got {self.k}")

    @property
    def label(self) -> str:
        return f"k{self.k}"


@dataclass(frozen=True)
class Cutpoints:
    """Half-open bins (-inf, c1), [c1, c2), ..., [c_last, inf)."""

    values: tuple[float, ...]

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        if not values:
            raise InvalidParameter("Cutpoints need at least one value")
        if any(b <= a for a, b in zip(values, values[1:])):
            raise InvalidParameter(f"Cutpoints must be strictly increasing: {values}")
        object.__setattr__(self, "values", values)

    @property
    def label(self) -> str:
        return "cutpoints:" + ",".join(repr(v) for v in self.values)


CoarseningRule = Union[AutoSturges, FixedK, Cutpoints]


def parse_rule(text: str) -> CoarseningRule:
    """Read 'auto', 'k3' (or 'fixed:3') or 'cutpoints:3.5,4.5'."""
    text = text.strip().lower()
    if text == "auto":
        return AutoSturges()
    if text.startswith("cutpoints:"):
        try:
            return Cutpoints(tuple(float(v) for v in text.split(":", 1)[1].split(",") if v.strip()))
        except ValueError:
            raise InvalidParameter(f"Unreadable cutpoints {text!r}") from None
    for prefix in ("fixed:", "k"):
        if text.startswith(prefix) and text[len(prefix):].isdigit():
            return FixedK(int(text[len(prefix):]))
    raise InvalidParameter(f"Unknown coarsening rule {text!r}")


@dataclass(frozen=True)
class CoarseningSpec:
    """One rule per covariate, or a single rule applied to all of them."""

    rules: tuple[CoarseningRule, ...]

    @classmethod
    def uniform(cls, rule: CoarseningRule) -> "CoarseningSpec":
        return cls((rule,))

    @classmethod
    def auto(cls) -> "CoarseningSpec":
        return cls.uniform(AutoSturges())

    @classmethod
    def fixed(cls, k: int) -> "CoarseningSpec":
        return cls.uniform(FixedK(k))

    def rules_for(self, p: int) -> tuple[CoarseningRule, ...]:
        if len(self.rules) == 1:
            return self.rules * p
        if len(self.rules) != p:
            raise DimensionMismatch(f"{len(self.rules)} coarsening rules for {p} covariates")
        return self.rules


@dataclass(frozen=True)
class CoarsenedData:
    C: np.ndarray
    bin_edges: tuple[np.ndarray, ...]
    bin_counts: tuple[int, ...]
    rule_labels: tuple[str, ...] = field(default=())

    def stratum_key(self, i: int) -> tuple[int, ...]:
        return tuple(int(c) for c in self.C[i])

    def strata(self) -> tuple[np.ndarray, np.ndarray]:
        """(distinct keys in lexicographic order, per-unit position in that list)"""
        keys, inverse = np.unique(self.C, axis=0, return_inverse=True)
        return keys, np.asarray(inverse).reshape(-1)


def sturges_bin_count(n: int) -> int:
    if n < 1:
        raise InvalidParameter(f"Sturges' rule needs n >= 1, got {n}")
    return math.ceil(math.log2(n) + 1)


def _equal_width(x: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    low, high = float(x.min()), float(x.max())
    if low == high:
        return np.zeros(x.size, dtype=np.int64), np.array([low, high])
    edges = np.linspace(low, high, k + 1)
    # the last bin is closed on the right
    bins = np.searchsorted(edges[1:-1], x, side="right")
    return np.clip(bins, 0, k - 1).astype(np.int64), edges


def coarsen_matrix(X: np.ndarray, spec: CoarseningSpec) -> CoarsenedData:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    n, p = X.shape
    columns, edges, counts, labels = [], [], [], []
    for j, rule in enumerate(spec.rules_for(p)):
        x = X[:, j]
        if isinstance(rule, Cutpoints):
            cuts = np.asarray(rule.values)
            bins = np.searchsorted(cuts, x, side="right").astype(np.int64)
            edges_j, count = cuts, cuts.size + 1
        else:
            k = sturges_bin_count(n) if isinstance(rule, AutoSturges) else rule.k
            bins, edges_j = _equal_width(x, k)
            count = k if edges_j[0] != edges_j[-1] else 1
        columns.append(bins)
        edges.append(edges_j)
        counts.append(count)
        labels.append(rule.label)
    return CoarsenedData(np.column_stack(columns), tuple(edges), tuple(counts), tuple(labels))


def coarsen(data: Dataset, spec: CoarseningSpec) -> CoarsenedData:
    return coarsen_matrix(data.X, spec)


def _retained_strata(W: np.ndarray, coarsened: CoarsenedData):
    keys, inverse = coarsened.strata()
    treated = np.bincount(inverse[W == 1], minlength=keys.shape[0])
    control = np.bincount(inverse[W == 0], minlength=keys.shape[0])
    retained = (treated > 0) & (control > 0)
    if not retained.any():
        raise EmptyMatch("No stratum holds both treated and control units")
    # renumber retained strata 0..R-1, everything else -1
    renumber = np.full(keys.shape[0], -1, dtype=np.int64)
    renumber[retained] = np.arange(int(retained.sum()))
    stratum_ids = renumber[inverse]
    return keys[retained], stratum_ids, treated[retained], control[retained]


def _one_to_one(
    X: np.ndarray, W: np.ndarray, stratum_ids: np.ndarray, strata: int, order_seed: Optional[int]
) -> np.ndarray:
    Z = StandardScaler().fit_transform(X)
    rng = np.random.default_rng(order_seed) if order_seed is not None else None
    pairs = []
    for s in range(strata):
        members = stratum_ids == s
        treated = np.flatnonzero(members & (W == 1))
        controls = np.flatnonzero(members & (W == 0))
        order = np.arange(treated.size) if rng is None else rng.permutation(treated.size)
        distance = pairwise_distances(Z[treated], Z[controls])
        available = np.ones(controls.size, dtype=bool)
        for i in order:
            if not available.any():
                break
            j = int(np.argmin(np.where(available, distance[i], np.inf)))
            available[j] = False
            pairs.append((treated[i], controls[j]))
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def cem_match(
    data: Dataset,
    coarsened: CoarsenedData,
    mode: Literal["weights", "one_to_one"] = "weights",
    order_seed: Optional[int] = None,
) -> MatchResult:
    """
    Exact matching on the coarsened covariates.

    Args:
        data: Source sample
        coarsened: Bin indices aligned with the rows of data
        mode: "weights" keeps every unit of a retained stratum, treated at weight 1 and
            controls at (m_C/m_T)(m_T^s/m_C^s); "one_to_one" pairs units greedily
            inside each stratum by standardized Euclidean distance
        order_seed: Random treated order inside strata for one_to_one (index order if None)

    Returns:
        MatchResult labelled CEM-weights or CEM-1to1
    """
    if coarsened.C.shape[0] != data.n:
        raise DimensionMismatch(f"Coarsened data has {coarsened.C.shape[0]} rows, dataset {data.n}")
    W = data.W
    keys, stratum_ids, treated_s, control_s = _retained_strata(W, coarsened)
    in_stratum = stratum_ids >= 0

    if mode == "weights":
        m_T, m_C = int(treated_s.sum()), int(control_s.sum())
        weights = np.zeros(data.n)
        weights[in_stratum & (W == 1)] = 1.0
        controls = in_stratum & (W == 0)
        s = stratum_ids[controls]
        weights[controls] = (m_C / m_T) * (treated_s[s] / control_s[s])
        result = MatchResult(W, np.empty((0, 2)), weights, DESIGN_CEM_WEIGHTS, stratum_ids, tuple(map(tuple, keys)))
    elif mode == "one_to_one":
        pairs = _one_to_one(data.X, W, stratum_ids, keys.shape[0], order_seed)
        weights = np.zeros(data.n)
        weights[pairs.ravel()] = 1.0
        result = MatchResult(W, pairs, weights, DESIGN_CEM_ONE_TO_ONE, stratum_ids, tuple(map(tuple, keys)))
    else:
        raise InvalidParameter(f"Unknown CEM mode {mode!r}")

    logger.debug(
        f"CEM ({mode}) kept {result.matched_treated}/{result.m_T} treated in {keys.shape[0]} strata"
    )
    return result


@dataclass(frozen=True)
class WithinBinImbalance:
    stratum_keys: tuple[tuple[int, ...], ...]
    deltas: np.ndarray
    treated_counts: np.ndarray
    pooled: np.ndarray

    @property
    def pooled_norm(self) -> float:
        return float(np.linalg.norm(self.pooled))


def within_bin_imbalance(data: Dataset, coarsened: CoarsenedData) -> WithinBinImbalance:
    """
    Treated-minus-control covariate means inside each retained stratum, and their
    average weighted by the stratum treated counts.
    """
    keys, stratum_ids, treated_s, _ = _retained_strata(data.W, coarsened)
    strata = keys.shape[0]
    deltas = np.empty((strata, data.p))
    for s in range(strata):
        members = stratum_ids == s
        deltas[s] = data.X[members & (data.W == 1)].mean(axis=0) - data.X[members & (data.W == 0)].mean(axis=0)
    pooled = np.average(deltas, axis=0, weights=treated_s)
    return WithinBinImbalance(tuple(map(tuple, keys)), deltas, treated_s, pooled)


def coarsening_report(coarsened: CoarsenedData, names: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """One row per covariate: rule, bin count, edges and occupancy."""
    p = coarsened.C.shape[1]
    names = list(names) if names is not None else [covariate_name(j) for j in range(p)]
    rows = []
    for j in range(p):
        occupancy = np.bincount(coarsened.C[:, j], minlength=coarsened.bin_counts[j])
        rows.append(
            {
                "variable": names[j],
                "rule": coarsened.rule_labels[j] if coarsened.rule_labels else "",
                "bins": coarsened.bin_counts[j],
                "bin_edges": ";".join(repr(float(e)) for e in coarsened.bin_edges[j]),
                "bin_counts": ";".join(str(int(c)) for c in occupancy),
            }
        )
    return pd.DataFrame(rows)


class CoarseningMatcher:
    """Coarsen then match, for one CoarseningSpec and mode."""

    def __init__(
        self,
        spec: CoarseningSpec,
        mode: Literal["weights", "one_to_one"] = "weights",
        order_seed: Optional[int] = None,
    ):
        self.spec = spec
        self.mode = mode
        self.order_seed = order_seed

    def match(self, data: Dataset) -> tuple[MatchResult, CoarsenedData]:
        coarsened = coarsen(data, self.spec)
        return cem_match(data, coarsened, self.mode, self.order_seed), coarsened
