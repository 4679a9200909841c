from typing import Any

from fastapi import APIRouter, HTTPException, Path

from app.core.config import SCENARIO_DIR
from app.core.errors import ConfigInvalid
from app.services.datagen import expected_prevalence
from app.services.scenario import load_scenario_config

router = APIRouter(prefix="/scenarios", tags=["scenarios"])


@router.get("")
def list_scenarios() -> list[str]:
    """Names of the shipped scenario files."""
    return sorted(path.stem for path in SCENARIO_DIR.glob("*.env"))


@router.get("/{scenario_id}")
def get_scenario(
    scenario_id: str = Path(..., pattern=r"^[A-Za-z0-9_-]+$", description="Shipped scenario name"),
) -> Any:
    """
    Parsed scenario with its config hash and the model-implied treated share
    """
    path = SCENARIO_DIR / f"{scenario_id}.env"
    if not path.is_file():
        raise HTTPException(status_code=404, detail=f"Scenario {scenario_id} not found")
    try:
        config = load_scenario_config(path)
    except ConfigInvalid as e:
        raise HTTPException(status_code=500, detail=str(e))
    return {
        "config": config.model_dump(),
        "config_hash": config.config_hash,
        "expected_prevalence": expected_prevalence(config, draws=100_000),
    }
