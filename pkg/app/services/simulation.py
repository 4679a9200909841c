# app/services/simulation.py
"""
Monte-Carlo replication engine.

A scenario expands into cells (coefficient pair x sample size). Every replication
of every cell is an independent task: draw the dataset from its own substream,
run each requested design, measure balance and fit each requested estimator.
Tasks fan out over a joblib pool and are reduced in (cell, replication) order,
so the tables are the same for any worker count.
"""

import math
from dataclasses import dataclass, field
from itertools import product
from typing import Optional

import numpy as np
import pandas as pd

from app.core.errors import MatchingLabError
from app.core.logging import get_logger
from app.services.balance import balance_report, cross_replication_imbalance
from app.services.cem import within_bin_imbalance
from app.services.datagen import (
    CoefficientPair,
    Dataset,
    draw_dataset,
    generate_coefficient_pairs,
    true_patt_oracle,
)
from app.services.estimators import (
    EstimateRecord,
    ModelSpec,
    enumerate_models,
    estimate,
    model_dependence_summary,
    patt_record,
    summarize_estimates,
)
from app.services.match_result import MatchResult
from app.services.matching import run_scenario_design
from app.services.parallel import parallel_map
from app.services.scenario import INTERACTION, INTERACTION_ESTIMATORS, ScenarioConfig

logger = get_logger(__name__)

CELL_COLUMNS = ["cell", "pair_id", "sine_distance", "n"]


@dataclass(frozen=True)
class SimulationCell:
    index: int
    config: ScenarioConfig
    pair_id: Optional[int] = None
    sine_distance: float = math.nan

    @property
    def keys(self) -> dict:
        return {
            "cell": self.index,
            "pair_id": -1 if self.pair_id is None else self.pair_id,
            "sine_distance": self.sine_distance,
            "n": self.config.n,
        }


@dataclass(frozen=True)
class ReplicationTask:
    cell: SimulationCell
    replication_index: int


@dataclass
class ReplicationOutput:
    estimates: list[dict] = field(default_factory=list)
    balance: list[dict] = field(default_factory=list)
    samples: list[dict] = field(default_factory=list)
    model_dependence: list[dict] = field(default_factory=list)
    treated_fraction: Optional[float] = None


@dataclass
class SimulationResults:
    cells: list[SimulationCell]
    pairs: list[CoefficientPair]
    replications: pd.DataFrame
    balance: pd.DataFrame
    samples: pd.DataFrame
    aggregate: pd.DataFrame
    imbalance: pd.DataFrame
    model_dependence: pd.DataFrame

    @property
    def failure_count(self) -> int:
        return int((self.replications["failure"] != "").sum())


def cell_seed(seed: int, cell_index: int) -> int:
    """Seed of one cell, derived from the scenario seed."""
    state = np.random.SeedSequence(seed, spawn_key=(cell_index,)).generate_state(1, np.uint64)
    return int(state[0])


def build_cells(config: ScenarioConfig) -> tuple[list[SimulationCell], list[CoefficientPair]]:
    """Expand the coefficient-pair and sample-size sweeps into cells."""
    pairs: list[CoefficientPair] = []
    if config.coefficient_pairs:
        pairs = generate_coefficient_pairs(
            config.p,
            config.coefficient_pairs,
            seed=config.seed if config.pair_seed is None else config.pair_seed,
        )
    sizes = config.sample_sizes or [config.n]
    pair_ids: list[Optional[int]] = list(range(len(pairs))) or [None]

    grid = list(product(pair_ids, sizes))
    cells = []
    for index, (pair_id, n) in enumerate(grid):
        overrides = {"n": n}
        sine = math.nan
        if pair_id is not None:
            pair = pairs[pair_id]
            overrides.update(alpha1=pair.alpha1.tolist(), beta2=pair.beta2.tolist())
            sine = pair.sine_distance
        if len(grid) > 1:
            overrides["seed"] = cell_seed(config.seed, index)
        cells.append(SimulationCell(index, config.with_overrides(**overrides), pair_id, sine))
    return cells, pairs


def _estimate_row(keys: dict, design: str, record: EstimateRecord) -> dict:
    return {
        **keys,
        "design": design,
        "estimator": record.estimator_label,
        "estimate": record.point_estimate,
        "beta1_hat": record.beta1_hat,
        "failure": record.failure or "",
    }


def _failed_rows(keys: dict, config: ScenarioConfig, designs, reason: str) -> list[dict]:
    return [
        _estimate_row(keys, design, EstimateRecord.failed(estimator, design, reason, keys["replication"]))
        for design in designs
        for estimator in config.estimators
    ]


def estimate_all(
    config: ScenarioConfig, data: Dataset, match: MatchResult, replication_index: Optional[int] = None
) -> list[EstimateRecord]:
    """Every estimator the scenario requests, on one matched dataset."""
    records = []
    interaction = None
    for estimator in config.estimators:
        try:
            if estimator in INTERACTION_ESTIMATORS:
                if interaction is None:
                    interaction = estimate(match, data, ModelSpec.for_scenario(config, INTERACTION), replication_index)
                records.append(patt_record(interaction, estimator, data, match))
            else:
                record = estimate(match, data, ModelSpec.for_scenario(config, estimator), replication_index)
                records.append(record)
        except MatchingLabError as e:
            logger.warning(f"Replication {replication_index}, {match.design_label}, {estimator}: {e}")
            records.append(EstimateRecord.failed(estimator, match.design_label, type(e).__name__, replication_index))
    return records


def run_replication(task: ReplicationTask) -> ReplicationOutput:
    config = task.cell.config
    r = task.replication_index
    keys = {**task.cell.keys, "replication": r}
    output = ReplicationOutput()
    try:
        data = draw_dataset(config, r)
    except MatchingLabError as e:
        logger.warning(f"Cell {task.cell.index}, replication {r}: {e}")
        output.estimates = _failed_rows(keys, config, config.designs, type(e).__name__)
        return output
    output.treated_fraction = data.treated_count / data.n
    models = enumerate_models(config.p, config.model_sweep_degree) if config.model_sweep_degree else []

    for design in config.designs:
        try:
            match, coarsened = run_scenario_design(data, design, config)
        except MatchingLabError as e:
            logger.warning(f"Cell {task.cell.index}, replication {r}, {design}: {e}")
            output.estimates.extend(_failed_rows(keys, config, [design], type(e).__name__))
            continue
        output.samples.append({**keys, **match.summary(), "design": design})

        try:
            report = balance_report(
                data, match, covariance_source=config.covariance_source, metrics=config.balance_metrics
            )
        except MatchingLabError as e:
            logger.warning(f"Cell {task.cell.index}, replication {r}, {design} balance: {e}")
        else:
            for row in report.to_long(data.covariate_names).to_dict("records"):
                output.balance.append({**keys, "design": design, **row})
        if coarsened is not None and not match.is_empty:
            residual = within_bin_imbalance(data, coarsened)
            output.balance.append(
                {**keys, "design": design, "metric": "within_bin", "covariate": "", "value": residual.pooled_norm}
            )

        for record in estimate_all(config, data, match, r):
            output.estimates.append(_estimate_row(keys, design, record))

        if models:
            try:
                summary = model_dependence_summary(match, data, config, models)
            except MatchingLabError as e:
                logger.warning(f"Cell {task.cell.index}, replication {r}, {design} model sweep: {e}")
            else:
                output.model_dependence.append({**keys, "design": design, **summary})
    return output


def _frame(rows: list[dict], columns: list[str]) -> pd.DataFrame:
    return pd.DataFrame(rows, columns=columns) if rows else pd.DataFrame(columns=columns)


ESTIMATE_COLUMNS = CELL_COLUMNS + ["replication", "design", "estimator", "estimate", "beta1_hat", "failure"]
BALANCE_COLUMNS = CELL_COLUMNS + ["replication", "design", "metric", "covariate", "value"]
SAMPLE_COLUMNS = CELL_COLUMNS + [
    "replication",
    "design",
    "m_T",
    "m_C",
    "matched_treated",
    "matched_control",
    "pairs",
    "strata",
    "treated_share",
    "control_weight_total",
    "control_weight_total_source",
]
MODEL_DEPENDENCE_COLUMNS = CELL_COLUMNS + [
    "replication",
    "design",
    "models",
    "model_failures",
    "estimate_variance",
    "max_estimate",
    "correct_estimate",
]


def aggregate_cells(
    cells: list[SimulationCell],
    replications: pd.DataFrame,
    treated_fractions: dict[int, float],
    oracle_draws: Optional[int] = None,
) -> pd.DataFrame:
    """One row per (cell, design, estimator) with bias, SD, MSE and RMSE against the true PATT."""
    rows = []
    for cell in cells:
        oracle = true_patt_oracle(cell.config, oracle_draws or cell.config.oracle_draws)
        cell_rows = replications[replications["cell"] == cell.index]
        for design in cell.config.designs:
            for estimator in cell.config.estimators:
                subset = cell_rows[(cell_rows["design"] == design) & (cell_rows["estimator"] == estimator)]
                ok = subset[subset["failure"] == ""]["estimate"].to_numpy(dtype=float)
                row = {
                    "Scenario": cell.config.scenario_id,
                    "Cell": cell.index,
                    "Pair": -1 if cell.pair_id is None else cell.pair_id,
                    "Sine Distance": cell.sine_distance,
                    "n": cell.config.n,
                    "Proportion treated": treated_fractions.get(cell.index, math.nan),
                    "Design": design,
                    "Model": estimator,
                }
                try:
                    metrics = summarize_estimates(ok, oracle.value, len(subset) - ok.size)
                except MatchingLabError:
                    logger.warning(
                        f"Cell {cell.index}, {design}, {estimator}: only {ok.size} successful replications"
                    )
                    row.update(
                        {
                            "Mean Estimate": math.nan,
                            "Bias": math.nan,
                            "SD": math.nan,
                            "MSE": math.nan,
                            "Root MSE": math.nan,
                            "MSE (population)": math.nan,
                            "True Value": oracle.value,
                            "Replications": int(ok.size),
                            "Failures": int(len(subset) - ok.size),
                        }
                    )
                else:
                    row.update(metrics.as_row())
                row["Oracle SE"] = oracle.standard_error
                rows.append(row)
    return pd.DataFrame(rows)


def imbalance_summary(balance: pd.DataFrame, samples: pd.DataFrame) -> pd.DataFrame:
    """
    Per (cell, design): signed mean SMD per covariate and their cross-replication
    total, replication means of the other metrics and of the matched group sizes.
    """
    columns = CELL_COLUMNS + ["design", "metric", "covariate", "value"]
    rows = []
    if not balance.empty:
        for (cell, design), group in balance.groupby(["cell", "design"], sort=True):
            keys = {c: group[c].iloc[0] for c in CELL_COLUMNS}
            smd = group[group["metric"] == "smd"]
            if not smd.empty:
                table = smd.pivot(index="replication", columns="covariate", values="value")
                summary = cross_replication_imbalance(table.to_numpy())
                for name, value in zip(table.columns, summary.mean_smd_per_covariate):
                    rows.append({**keys, "design": design, "metric": "mean_smd", "covariate": name, "value": value})
                rows.append({**keys, "design": design, "metric": "cross_replication", "covariate": "", "value": summary.imbalance})
            others = group[group["metric"] != "smd"].groupby("metric", sort=True)["value"].mean()
            for metric, value in others.items():
                rows.append({**keys, "design": design, "metric": metric, "covariate": "", "value": value})
    if not samples.empty:
        sizes = samples.groupby(["cell", "design"], sort=True)[["matched_treated", "matched_control"]].mean()
        for (cell, design), values in sizes.iterrows():
            keys = {c: samples.loc[samples["cell"] == cell, c].iloc[0] for c in CELL_COLUMNS}
            for metric in ("matched_treated", "matched_control"):
                rows.append({**keys, "design": design, "metric": metric, "covariate": "", "value": values[metric]})
    return _frame(rows, columns)


def simulate(config: ScenarioConfig, workers: int = 1, oracle_draws: Optional[int] = None) -> SimulationResults:
    """
    Run every replication of every cell of a scenario.

    Args:
        config: Scenario, including designs, estimators and sweeps
        workers: joblib worker processes
        oracle_draws: Draws for the true-PATT oracle (settings default when None)

    Returns:
        SimulationResults holding the per-replication and summary tables
    """
    cells, pairs = build_cells(config)
    tasks = [ReplicationTask(cell, r) for cell in cells for r in range(cell.config.replications)]
    logger.info(
        f"Scenario {config.scenario_id}: {len(cells)} cell(s), {len(tasks)} replications, {workers} worker(s)"
    )
    outputs = parallel_map(run_replication, tasks, workers)

    replications = _frame([row for o in outputs for row in o.estimates], ESTIMATE_COLUMNS)
    balance = _frame([row for o in outputs for row in o.balance], BALANCE_COLUMNS)
    samples = _frame([row for o in outputs for row in o.samples], SAMPLE_COLUMNS)
    model_dependence = _frame([row for o in outputs for row in o.model_dependence], MODEL_DEPENDENCE_COLUMNS)
    fractions: dict[int, list[float]] = {}
    for task, output in zip(tasks, outputs):
        if output.treated_fraction is not None:
            fractions.setdefault(task.cell.index, []).append(output.treated_fraction)
    treated_fractions = {cell: float(np.mean(values)) for cell, values in fractions.items()}

    aggregate = aggregate_cells(cells, replications, treated_fractions, oracle_draws)
    imbalance = imbalance_summary(balance, samples)
    failures = int((replications["failure"] != "").sum()) if not replications.empty else 0
    logger.info(f"Scenario {config.scenario_id} finished: {failures} failed estimates")
    return SimulationResults(cells, pairs, replications, balance, samples, aggregate, imbalance, model_dependence)
