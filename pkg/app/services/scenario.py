# app/services/scenario.py
"""
Scenario descriptions: the data-generating process plus the run plan.

A scenario file is flat ``KEY=value`` text (read with python-dotenv). Keys are
case-insensitive field names of ScenarioConfig; vectors are comma lists:

    SCENARIO_ID=linear5
    P=5
    N=5000
    ALPHA0=-0.9
    ALPHA1=0.4472,-0.4472,0.4472,0.4472,0.4472
    BETA1=6
    BETA2=...
    DESIGNS=PSM,CEM-Auto,CEM-K3
"""

import hashlib
from pathlib import Path
from typing import Annotated, Any, Literal, Optional

from dotenv import dotenv_values
from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    PositiveFloat,
    PositiveInt,
    ValidationError,
    model_validator,
)
from typing_extensions import Self

from app.core.errors import ConfigInvalid

PSM = "PSM"
CEM_AUTO = "CEM-Auto"
CEM_K3 = "CEM-K3"
UNMATCHED = "Unmatched"
DESIGNS = (PSM, CEM_AUTO, CEM_K3, UNMATCHED)

UNADJUSTED = "unadjusted"
LINEAR = "linear"
INTERACTION = "interaction"
PATT_MATCHED = "patt-matched"
PATT_SOURCE = "patt-source"
ESTIMATORS = (UNADJUSTED, LINEAR, PATT_MATCHED, PATT_SOURCE)
INTERACTION_ESTIMATORS = (PATT_MATCHED, PATT_SOURCE)

BALANCE_METRICS = ("smd", "pairwise_mahalanobis", "group_mahalanobis", "abs_mean_diff", "l1_histogram")


def parse_list(v: Any) -> Any:
    if v is None:
        return []
    if isinstance(v, str):
        return [item.strip() for item in v.split(",") if item.strip()]
    return v


Vector = Annotated[list[float], BeforeValidator(parse_list)]
IndexList = Annotated[list[int], BeforeValidator(parse_list)]


class ScenarioConfig(BaseModel):
    """Full description of one simulation scenario."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    scenario_id: str = "custom"

    # Data-generating process
    p: PositiveInt
    n: int = Field(ge=10)
    alpha0: float
    alpha1: Vector
    beta0: float = 0.0
    beta1: float
    beta2: Vector
    theta: Vector = []
    # 1-based covariate numbers, matching the x1..xp column names
    interaction_subset: IndexList = []
    covariate_scale: PositiveFloat = 1.0
    nonlinear_treatment: bool = False
    nonlinear_outcome: bool = False
    quadratic_weight: float = 0.5
    interaction_weight: float = 0.3
    error_sd: PositiveFloat = 1.0
    replications: PositiveInt = 500
    seed: int = Field(default=20240601, ge=0, lt=2**64)

    # Run plan
    designs: Annotated[list[Literal["PSM", "CEM-Auto", "CEM-K3", "Unmatched"]], BeforeValidator(parse_list)] = [
        PSM,
        CEM_AUTO,
        CEM_K3,
    ]
    estimators: Annotated[
        list[Literal["unadjusted", "linear", "patt-matched", "patt-source"]], BeforeValidator(parse_list)
    ] = [
        UNADJUSTED,
        LINEAR,
    ]
    balance_metrics: Annotated[
        list[Literal["smd", "pairwise_mahalanobis", "group_mahalanobis", "abs_mean_diff", "l1_histogram"]],
        BeforeValidator(parse_list),
    ] = list(BALANCE_METRICS)
    caliper_multiplier: PositiveFloat = 0.2
    cem_mode: Literal["weights", "one_to_one"] = "weights"
    covariance_source: Literal["original", "matched"] = "original"
    coefficient_pairs: int = Field(default=0, ge=0)
    pair_seed: Optional[int] = Field(default=None, ge=0)
    sample_sizes: IndexList = []
    oracle_draws: Optional[int] = Field(default=None, ge=100_000)
    # degree of the monomial pool for the model-dependence sweep; 0 skips it
    model_sweep_degree: int = Field(default=0, ge=0, le=3)

    @model_validator(mode="after")
    def _check_shapes(self) -> Self:
        if len(self.alpha1) != self.p:
            raise ValueError(f"alpha1 has {len(self.alpha1)} entries, expected p={self.p}")
        if len(self.beta2) != self.p:
            raise ValueError(f"beta2 has {len(self.beta2)} entries, expected p={self.p}")
        if len(self.theta) != len(self.interaction_subset):
            raise ValueError("theta and interaction_subset must have the same length")
        if len(set(self.interaction_subset)) != len(self.interaction_subset):
            raise ValueError("interaction_subset has repeated covariates")
        for j in self.interaction_subset:
            if not 1 <= j <= self.p:
                raise ValueError(f"interaction_subset entry {j} outside 1..{self.p}")
        if any(n < 10 for n in self.sample_sizes):
            raise ValueError("every sample size must be at least 10")
        if set(INTERACTION_ESTIMATORS) & set(self.estimators) and not self.interaction_subset:
            raise ValueError("the PATT estimators need a non-empty interaction_subset")
        return self

    @property
    def interaction_columns(self) -> tuple[int, ...]:
        """0-based indices of the covariates that modify the effect."""
        return tuple(j - 1 for j in self.interaction_subset)

    @property
    def is_heterogeneous(self) -> bool:
        return len(self.theta) > 0 and any(t != 0 for t in self.theta)

    def with_overrides(self, **updates: Any) -> "ScenarioConfig":
        """Validated copy with some fields replaced."""
        data = self.model_dump()
        data.update(updates)
        return ScenarioConfig.model_validate(data)

    def to_text(self) -> str:
        """Canonical KEY=value serialization (sorted keys)."""
        lines = []
        for name in sorted(ScenarioConfig.model_fields):
            value = getattr(self, name)
            if value is None:
                continue
            lines.append(f"{name.upper()}={_format_value(value)}")
        return "\n".join(lines) + "\n"

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def load_scenario_config(path: str | Path) -> ScenarioConfig:
    """Read and validate a KEY=value scenario file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigInvalid(f"Scenario file not found: {path}")
    raw = dotenv_values(path)
    data = {key.lower(): value for key, value in raw.items() if value is not None}
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigInvalid(f"Invalid scenario file {path}:\n{e}") from None


def write_scenario_config(config: ScenarioConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config.to_text(), encoding="utf-8", newline="\n")
    return path
