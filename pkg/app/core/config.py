import warnings
from pathlib import Path
from typing import Annotated, Any, Literal

from pydantic import (
    AnyUrl,
    BeforeValidator,
    PositiveFloat,
    PositiveInt,
    computed_field,
    model_validator,
)
from pydantic_settings import BaseSettings, SettingsConfigDict
from typing_extensions import Self

# Get the directory where the config.py file is located
CONFIG_DIR = Path(__file__).parent.absolute()
# Get the project root (one level up)
PROJECT_ROOT = CONFIG_DIR.parent
SCENARIO_DIR = PROJECT_ROOT.parent / "scenarios"

MIN_ORACLE_DRAWS = 100_000


def parse_cors(v: Any) -> list[str] | str:
    if isinstance(v, str) and not v.startswith("["):
        return [i.strip() for i in v.split(",")]
    elif isinstance(v, list | str):
        return v
    raise ValueError(v)


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file="./.env",
        env_ignore_empty=True,
        extra="ignore",
    )
    API_V1_STR: str = "/api/v1"
    FRONTEND_HOST: str = "http://localhost:5173"
    ENVIRONMENT: Literal["local", "staging", "production"] = "local"
    LOG_LEVEL: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"

    MATCHLAB_CORS_ORIGINS: Annotated[
        list[AnyUrl] | str, BeforeValidator(parse_cors)
    ] = []

    @computed_field  # type: ignore[prop-decorator]
    @property
    def all_cors_origins(self) -> list[str]:
        return [str(origin).rstrip("/") for origin in self.MATCHLAB_CORS_ORIGINS] + [
            self.FRONTEND_HOST
        ]

    # Simulation scale
    DEFAULT_REPLICATIONS: PositiveInt = 500
    FULL_REPLICATIONS: PositiveInt = 2000
    FULL_COEFFICIENT_PAIRS: PositiveInt = 300
    ORACLE_DRAWS: PositiveInt = 1_000_000
    FULL_ORACLE_DRAWS: PositiveInt = 100_000_000
    ORACLE_CHUNK_SIZE: PositiveInt = 1_000_000
    DEFAULT_WORKERS: PositiveInt = 1
    OUTPUT_DIR: str = "runs"

    # Matching
    CALIPER_MULTIPLIER: PositiveFloat = 0.2
    CONSISTENCY_CALIPER_MULTIPLIER: PositiveFloat = 0.05
    CEM_FIXED_BINS: PositiveInt = 3

    # Numerical kernels
    IRLS_TOL: PositiveFloat = 1e-8
    IRLS_MAX_ITER: PositiveInt = 50
    SEPARATION_THRESHOLD: PositiveFloat = 30.0
    SINGULAR_TOL: PositiveFloat = 1e-10

    # Data generation
    MAX_REDRAWS: int = 100
    PAIR_SCALE_K: PositiveFloat = 1.2
    SINE_DISTANCE_BINS: PositiveInt = 10
    MAX_PAIR_DRAWS: PositiveInt = 2_000_000

    def _check_oracle_draws(self, var_name: str, value: int) -> None:
        if value < MIN_ORACLE_DRAWS:
            message = (
                f"{var_name}={value} is below {MIN_ORACLE_DRAWS}, "
                "the true-PATT oracle will be too noisy for acceptance checks."
            )
            if self.ENVIRONMENT == "local":
                warnings.warn(message, stacklevel=1)
            else:
                raise ValueError(message)

    @model_validator(mode="after")
    def _enforce_oracle_scale(self) -> Self:
        self._check_oracle_draws("ORACLE_DRAWS", self.ORACLE_DRAWS)
        self._check_oracle_draws("FULL_ORACLE_DRAWS", self.FULL_ORACLE_DRAWS)
        return self


settings = Settings()
