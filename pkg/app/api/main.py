from fastapi import APIRouter

from app.api.routers import debug, matching, scenarios

api_router = APIRouter()
api_router.include_router(matching.router)
api_router.include_router(scenarios.router)
api_router.include_router(debug.router)
