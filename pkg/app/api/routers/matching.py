from typing import Any, Literal, NoReturn, Optional

import numpy as np
from fastapi import APIRouter, HTTPException
from pydantic import BaseModel, Field, PositiveFloat

from app.core.errors import MatchingLabError, NumericalError
from app.core.logging import get_logger
from app.services.balance import balance_comparison, balance_report
from app.services.cem import CoarseningMatcher, CoarseningSpec, parse_rule
from app.services.datagen import Dataset
from app.services.estimators import ModelSpec, estimate
from app.services.match_result import (
    DESIGN_CEM_WEIGHTS,
    DESIGN_PSM,
    MatchResult,
)
from app.services.propensity import PropensityMatcher
from app.services.scenario import BALANCE_METRICS

logger = get_logger(__name__)

router = APIRouter(tags=["matching"])

Metric = Literal["smd", "pairwise_mahalanobis", "group_mahalanobis", "abs_mean_diff", "l1_histogram"]


class DatasetPayload(BaseModel):
    y: list[float]
    w: list[int]
    # one row of covariates per unit
    x: list[list[float]] = Field(min_length=1)

    def to_dataset(self) -> Dataset:
        return Dataset(np.asarray(self.x, dtype=float), np.asarray(self.w), np.asarray(self.y, dtype=float))


class MatchRequest(DatasetPayload):
    method: Literal["psm", "cem"] = "psm"
    caliper_multiplier: Optional[PositiveFloat] = None
    coarsening: str = "auto"
    mode: Literal["weights", "one_to_one"] = "weights"
    metrics: list[Metric] = list(BALANCE_METRICS)


class BalanceRequest(DatasetPayload):
    pairs: list[tuple[int, int]] = []
    weights: Optional[list[float]] = None
    metrics: list[Metric] = list(BALANCE_METRICS)


def _raise_http(e: MatchingLabError) -> NoReturn:
    status_code = 500 if isinstance(e, NumericalError) else 422
    logger.warning(f"{type(e).__name__}: {e}")
    raise HTTPException(status_code=status_code, detail=f"{type(e).__name__}: {e}")


def _match(request: MatchRequest, data: Dataset) -> MatchResult:
    if request.method == "psm":
        return PropensityMatcher(caliper_multiplier=request.caliper_multiplier).match(data)[0]
    spec = CoarseningSpec.uniform(parse_rule(request.coarsening))
    return CoarseningMatcher(spec, request.mode).match(data)[0]


@router.post("/match")
def match_dataset(request: MatchRequest) -> Any:
    """
    Match a dataset with PSM or CEM and return the pairs, unit weights,
    before/after balance and the unadjusted and linear effect estimates
    """
    try:
        data = request.to_dataset()
        match = _match(request, data)
        response: dict[str, Any] = {
            **match.summary(),
            "pairs": match.pairs.tolist(),
            "weights": match.weights.tolist(),
            "weights_source": match.control_weights("source").tolist(),
            "stratum_ids": None if match.stratum_ids is None else match.stratum_ids.tolist(),
            "balance": [],
            "estimates": [],
        }
        if match.is_empty:
            return response
        response["balance"] = balance_comparison(data, match, metrics=request.metrics).to_dict("records")
        for model in (ModelSpec.unadjusted(), ModelSpec.linear(data.p)):
            record = estimate(match, data, model)
            response["estimates"].append(
                {"model": record.estimator_label, "estimate": record.point_estimate, "beta1_hat": record.beta1_hat}
            )
    except MatchingLabError as e:
        _raise_http(e)
    return response


@router.post("/balance")
def audit_balance(request: BalanceRequest) -> Any:
    """
    Balance of a dataset under caller-supplied pairs or weights
    """
    try:
        data = request.to_dataset()
        if request.weights is not None:
            match = MatchResult(data.W, np.asarray(request.pairs).reshape(-1, 2), request.weights, DESIGN_CEM_WEIGHTS)
        elif request.pairs:
            pairs = np.asarray(request.pairs).reshape(-1, 2)
            weights = np.zeros(data.n)
            weights[pairs.ravel()] = 1.0
            match = MatchResult(data.W, pairs, weights, DESIGN_PSM)
        else:
            match = MatchResult.unmatched(data.W)
        report = balance_report(data, match, metrics=request.metrics)
    except MatchingLabError as e:
        _raise_http(e)
    return {
        **match.summary(),
        "balance": report.to_long(data.covariate_names).to_dict("records"),
    }
