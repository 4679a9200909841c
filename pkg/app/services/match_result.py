# app/services/match_result.py
"""Common output of every matching design."""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import pandas as pd

from app.core.errors import DimensionMismatch, SchemaError

DESIGN_PSM = "PSM"
DESIGN_CEM_WEIGHTS = "CEM-weights"
DESIGN_CEM_ONE_TO_ONE = "CEM-1to1"
DESIGN_UNMATCHED = "Unmatched"
DESIGN_LABELS = (DESIGN_PSM, DESIGN_CEM_WEIGHTS, DESIGN_CEM_ONE_TO_ONE, DESIGN_UNMATCHED)

ROLE_TREATED = "treated"
ROLE_CONTROL = "control"
ROLE_PRUNED = "pruned"

MATCH_COLUMNS = ["unit_index", "role", "pair_id", "stratum", "weight"]
# written alongside the required columns; ignored when a table is read back
MATCH_TABLE_COLUMNS = MATCH_COLUMNS + ["weight_source"]


@dataclass(frozen=True)
class MatchResult:
    """
    Pairs, strata and per-unit weights produced by one matching design.

    Attributes:
        W: Treatment vector of the source data
        pairs: k x 2 array of (treated_index, control_index)
        weights: Per-unit weight, 0 for pruned units
        design_label: One of PSM, CEM-weights, CEM-1to1, Unmatched
        stratum_ids: Per-unit stratum number, -1 outside retained strata
        stratum_keys: Coarsened tuple of each retained stratum, by stratum number
    """

    W: np.ndarray
    pairs: np.ndarray
    weights: np.ndarray
    design_label: str
    stratum_ids: Optional[np.ndarray] = None
    stratum_keys: tuple[tuple[int, ...], ...] = field(default=())

    def __post_init__(self):
        W = np.asarray(self.W).astype(np.int8)
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        weights = np.asarray(self.weights, dtype=float)
        n = W.shape[0]
        if weights.shape != (n,):
            raise DimensionMismatch(f"{weights.size} weights for {n} units")
        if self.design_label not in DESIGN_LABELS:
            raise SchemaError(f"Unknown design label {self.design_label!r}")
        if np.any(weights < 0):
            raise SchemaError("Match weights must be non-negative")
        if pairs.size:
            flat = pairs.ravel()
            if flat.min() < 0 or flat.max() >= n:
                raise DimensionMismatch("Pair index outside the data")
            if np.unique(flat).size != flat.size:
                raise SchemaError("A unit appears in more than one pair")
            if not (np.all(W[pairs[:, 0]] == 1) and np.all(W[pairs[:, 1]] == 0)):
                raise SchemaError("Pairs must be (treated, control)")
        if self.design_label in (DESIGN_PSM, DESIGN_CEM_ONE_TO_ONE):
            if not np.all((weights == 0) | (weights == 1)):
                raise SchemaError(f"{self.design_label} weights must be 0 or 1")
        stratum_ids = None
        if self.stratum_ids is not None:
            stratum_ids = np.asarray(self.stratum_ids, dtype=np.int64)
            if stratum_ids.shape != (n,):
                raise DimensionMismatch(f"{stratum_ids.size} stratum ids for {n} units")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "stratum_ids", stratum_ids)
        object.__setattr__(self, "stratum_keys", tuple(tuple(k) for k in self.stratum_keys))

    @classmethod
    def unmatched(cls, W: np.ndarray) -> "MatchResult":
        """Baseline design that keeps every unit with weight 1."""
        W = np.asarray(W)
        return cls(W, np.empty((0, 2)), np.ones(W.shape[0]), DESIGN_UNMATCHED)

    @classmethod
    def empty(cls, W: np.ndarray, design_label: str) -> "MatchResult":
        W = np.asarray(W)
        return cls(W, np.empty((0, 2)), np.zeros(W.shape[0]), design_label)

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def m_T(self) -> int:
        return int(self.W.sum())

    @property
    def m_C(self) -> int:
        return self.n - self.m_T

    @property
    def retained_mask(self) -> np.ndarray:
        return self.weights > 0

    @property
    def matched_treated(self) -> int:
        return int(np.count_nonzero(self.retained_mask & (self.W == 1)))

    @property
    def matched_control(self) -> int:
        return int(np.count_nonzero(self.retained_mask & (self.W == 0)))

    @property
    def treated_share_delta(self) -> float:
        """Proportion of treated units among the retained units."""
        total = self.matched_treated + self.matched_control
        return self.matched_treated / total if total else 0.0

    @property
    def is_empty(self) -> bool:
        return self.matched_treated == 0 or self.matched_control == 0

    @property
    def pair_count(self) -> int:
        return self.pairs.shape[0]

    @property
    def stratum_count(self) -> int:
        return len(self.stratum_keys) if self.stratum_ids is not None else 0

    def control_weights(self, convention: Literal["retained", "source"] = "retained") -> np.ndarray:
        """
        Per-unit weights under either reading of m_T/m_C in the CEM weight.

        "retained" counts only units in retained strata (the weights this result
        was built with); "source" uses the totals of the source data. Only the
        CEM-weights design differs between the two.
        """
        if convention not in ("retained", "source"):
            raise SchemaError(f"Unknown weight convention {convention!r}")
        if convention == "retained" or self.design_label != DESIGN_CEM_WEIGHTS or self.is_empty:
            return self.weights.copy()
        retained_ratio = self.matched_control / self.matched_treated
        source_ratio = self.m_C / self.m_T
        weights = self.weights.copy()
        controls = self.W == 0
        weights[controls] *= source_ratio / retained_ratio
        return weights

    def control_weight_total(self, convention: Literal["retained", "source"] = "retained") -> float:
        return float(self.control_weights(convention)[self.W == 0].sum())

    def to_frame(self) -> pd.DataFrame:
        retained = self.retained_mask
        role = np.where(self.W == 1, ROLE_TREATED, ROLE_CONTROL).astype(object)
        role[~retained] = ROLE_PRUNED
        pair_id = pd.array([pd.NA] * self.n, dtype="Int64")
        if self.pair_count:
            pair_id[self.pairs[:, 0]] = np.arange(self.pair_count)
            pair_id[self.pairs[:, 1]] = np.arange(self.pair_count)
        stratum = pd.array([pd.NA] * self.n, dtype="Int64")
        if self.stratum_ids is not None:
            in_stratum = self.stratum_ids >= 0
            stratum[in_stratum] = self.stratum_ids[in_stratum]
        return pd.DataFrame(
            {
                "unit_index": np.arange(self.n),
                "role": role,
                "pair_id": pair_id,
                "stratum": stratum,
                "weight": self.weights,
                "weight_source": self.control_weights("source"),
            }
        )

    @classmethod
    def from_frame(
        cls, frame: pd.DataFrame, W: np.ndarray, design_label: Optional[str] = None
    ) -> "MatchResult":
        """
        Rebuild a MatchResult from its CSV table and the source treatment vector.

        The design label is inferred when not given: pairs without strata is PSM,
        pairs within strata is CEM-1to1, strata alone is CEM-weights.
        """
        missing = [c for c in MATCH_COLUMNS if c not in frame.columns]
        if missing:
            raise SchemaError(f"Match table is missing columns: {missing}")
        W = np.asarray(W).astype(np.int8)
        frame = frame.sort_values("unit_index")
        if not np.array_equal(frame["unit_index"].to_numpy(), np.arange(W.shape[0])):
            raise DimensionMismatch(
                f"Match table covers {len(frame)} units, dataset has {W.shape[0]}"
            )
        roles = frame["role"].to_numpy()
        bad_roles = set(roles) - {ROLE_TREATED, ROLE_CONTROL, ROLE_PRUNED}
        if bad_roles:
            raise SchemaError(f"Unknown roles in match table: {sorted(bad_roles)}")
        expected = np.where(W == 1, ROLE_TREATED, ROLE_CONTROL)
        kept = roles != ROLE_PRUNED
        if not np.array_equal(roles[kept], expected[kept]):
            raise SchemaError("Match table roles disagree with the dataset treatment column")
        weights = pd.to_numeric(frame["weight"]).to_numpy(dtype=float)

        pair_id = pd.to_numeric(frame["pair_id"]).astype("Int64")
        paired = pair_id.notna().to_numpy()
        pairs = np.empty((0, 2), dtype=np.int64)
        if paired.any():
            members = pd.DataFrame({"pair_id": pair_id[paired].to_numpy(dtype=np.int64), "unit": np.flatnonzero(paired)})
            members["treated"] = W[members["unit"].to_numpy()] == 1
            treated = members[members["treated"]].set_index("pair_id")["unit"]
            control = members[~members["treated"]].set_index("pair_id")["unit"]
            if not (treated.index.is_unique and control.index.is_unique) or set(treated.index) != set(control.index):
                raise SchemaError("Every pair_id must hold exactly one treated and one control unit")
            order = np.sort(treated.index.to_numpy())
            pairs = np.column_stack([treated.loc[order].to_numpy(), control.loc[order].to_numpy()])

        stratum = pd.to_numeric(frame["stratum"]).astype("Int64")
        stratum_ids = None
        keys: tuple[tuple[int, ...], ...] = ()
        if stratum.notna().any():
            stratum_ids = stratum.fillna(-1).to_numpy(dtype=np.int64)
            keys = tuple((int(s),) for s in range(stratum_ids.max() + 1))

        if design_label is None:
            if pairs.size:
                design_label = DESIGN_CEM_ONE_TO_ONE if stratum_ids is not None else DESIGN_PSM
            elif stratum_ids is not None:
                design_label = DESIGN_CEM_WEIGHTS
            else:
                design_label = DESIGN_UNMATCHED
        return cls(W, pairs, weights, design_label, stratum_ids, keys)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, lineterminator="\n")
        return path

    @classmethod
    def read_csv(cls, path: str | Path, W: np.ndarray, design_label: Optional[str] = None) -> "MatchResult":
        path = Path(path)
        if not path.is_file():
            raise SchemaError(f"Match file not found: {path}")
        return cls.from_frame(pd.read_csv(path), W, design_label)

    def summary(self) -> dict:
        return {
            "design": self.design_label,
            "m_T": self.m_T,
            "m_C": self.m_C,
            "matched_treated": self.matched_treated,
            "matched_control": self.matched_control,
            "pairs": self.pair_count,
            "strata": self.stratum_count,
            "treated_share": self.treated_share_delta,
            "control_weight_total": self.control_weight_total("retained"),
            "control_weight_total_source": self.control_weight_total("source"),
        }
