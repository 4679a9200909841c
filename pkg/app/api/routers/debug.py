import os

from fastapi import APIRouter

from app import __version__
from app.core.config import SCENARIO_DIR, settings

router = APIRouter(tags=["debug"])


@router.get("/debug/settings")
async def debug_settings():
    """Debug endpoint to check settings values."""
    return {
        "cwd": os.getcwd(),
        "version": __version__,
        "API_V1_STR": settings.API_V1_STR,
        "FRONTEND_HOST": settings.FRONTEND_HOST,
        "ENVIRONMENT": settings.ENVIRONMENT,
        "LOG_LEVEL": settings.LOG_LEVEL,
        "all_cors_origins": settings.all_cors_origins,
        "SCENARIO_DIR": str(SCENARIO_DIR),
        "DEFAULT_REPLICATIONS": settings.DEFAULT_REPLICATIONS,
        "ORACLE_DRAWS": settings.ORACLE_DRAWS,
        "DEFAULT_WORKERS": settings.DEFAULT_WORKERS,
        "CALIPER_MULTIPLIER": settings.CALIPER_MULTIPLIER,
        "CEM_FIXED_BINS": settings.CEM_FIXED_BINS,
    }
