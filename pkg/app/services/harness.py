# app/services/harness.py
"""
Run orchestration: scenario runs written to a directory, plot-ready figure
tables read back from run directories, and matching/auditing of user datasets.
"""

import json
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Literal, Optional, Sequence

import pandas as pd
from dotenv import dotenv_values
from pydantic import BaseModel, Field, model_validator
from typing_extensions import Self

from app import __version__
from app.core.config import settings
from app.core.errors import EmptyMatch, InvalidParameter, MissingRun, SchemaError
from app.core.logging import get_logger
from app.services.balance import balance_comparison
from app.services.cem import AutoSturges, CoarseningMatcher, CoarseningSpec, Cutpoints, coarsening_report, parse_rule
from app.services.datagen import Dataset, coefficient_pairs_frame
from app.services.estimators import ModelSpec, estimate, records_frame
from app.services.match_result import MatchResult
from app.services.propensity import PropensityMatcher
from app.services.scenario import (
    BALANCE_METRICS,
    CEM_AUTO,
    CEM_K3,
    LINEAR,
    PSM,
    UNADJUSTED,
    UNMATCHED,
    ScenarioConfig,
    load_scenario_config,
    write_scenario_config,
)
from app.services.simulation import simulate

logger = get_logger(__name__)

RUN_TABLES = ("replications", "balance", "samples", "aggregate", "imbalance", "model_dependence")
FIGURES = ("balance", "model_dependence", "dimensionality", "imbalance_vs_n")
FIGURE_ALIASES = {"fig1": "balance", "fig2": "model_dependence", "fig3": "dimensionality"}


class RunManifest(BaseModel):
    scenario_id: str
    config_hash: str
    seed: int
    replication_count: int
    cell_count: int
    designs: list[str]
    estimators: list[str]
    output_paths: dict[str, str]
    failure_count: int
    wall_clock_seconds: float
    started_at: str
    software_version: str = __version__

    def write(self, path: Path) -> Path:
        path.write_text(self.model_dump_json(indent=2) + "\n", encoding="utf-8")
        return path


class FigureSeries(BaseModel):
    """One plotted line: x/y values plus the keys that group it into a panel."""

    label: str
    x: list[float]
    y: list[float]
    grouping: dict[str, str] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_lengths(self) -> Self:
        if len(self.x) != len(self.y):
            raise ValueError(f"Series {self.label} has {len(self.x)} x values and {len(self.y)} y values")
        return self

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"series": self.label, "x": self.x, "y": self.y})
        for key, value in sorted(self.grouping.items()):
            frame[key] = value
        return frame


def _write_table(frame: pd.DataFrame, path: Path) -> str:
    frame.to_csv(path, index=False, lineterminator="\n")
    return str(path)


def scale_up(config: ScenarioConfig) -> ScenarioConfig:
    """Large-scale settings: more replications, more coefficient pairs, bigger oracle."""
    overrides = {
        "replications": settings.FULL_REPLICATIONS,
        "oracle_draws": settings.FULL_ORACLE_DRAWS,
    }
    if config.coefficient_pairs:
        overrides["coefficient_pairs"] = settings.FULL_COEFFICIENT_PAIRS
    return config.with_overrides(**overrides)


def run_scenario(
    config_path: str | Path,
    output_dir: str | Path,
    workers: Optional[int] = None,
    full: bool = False,
    replications: Optional[int] = None,
) -> RunManifest:
    """
    Simulate a scenario file and write its tables plus a manifest.

    Args:
        config_path: KEY=value scenario file
        output_dir: Directory to write into (created if missing)
        workers: Worker processes, settings default when None
        full: Use the large-scale replication/pair/oracle settings
        replications: Replication count override

    Returns:
        RunManifest describing what was written
    """
    started = datetime.now(timezone.utc)
    clock = time.perf_counter()
    config = load_scenario_config(config_path)
    if full:
        config = scale_up(config)
    if replications is not None:
        config = config.with_overrides(replications=replications)
    workers = settings.DEFAULT_WORKERS if workers is None else workers

    output_dir = Path(output_dir)
    try:
        output_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise InvalidParameter(f"Cannot create output directory {output_dir}: {e}") from None

    results = simulate(config, workers)
    paths = {"scenario": str(write_scenario_config(config, output_dir / "scenario.env"))}
    for name in RUN_TABLES:
        paths[name] = _write_table(getattr(results, name), output_dir / f"{name}.csv")
    if results.pairs:
        paths["pairs"] = _write_table(coefficient_pairs_frame(results.pairs), output_dir / "pairs.csv")

    manifest = RunManifest(
        scenario_id=config.scenario_id,
        config_hash=config.config_hash,
        seed=config.seed,
        replication_count=config.replications,
        cell_count=len(results.cells),
        designs=list(config.designs),
        estimators=list(config.estimators),
        output_paths=paths,
        failure_count=results.failure_count,
        wall_clock_seconds=round(time.perf_counter() - clock, 3),
        started_at=started.isoformat(timespec="seconds"),
    )
    manifest.write(output_dir / "manifest.json")
    logger.info(f"Run written to {output_dir} in {manifest.wall_clock_seconds:.1f}s")
    return manifest


def _read_run_table(run_dirs: Sequence[str | Path], name: str) -> pd.DataFrame:
    frames = []
    for run_dir in run_dirs:
        path = Path(run_dir) / f"{name}.csv"
        if not path.is_file():
            raise MissingRun(f"{path} not found; run `simulate` first")
        frame = pd.read_csv(path, keep_default_na=False, na_values=[""])
        frame["run"] = str(run_dir)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def _x_axis(frame: pd.DataFrame, n_column: str, sine_column: str) -> str:
    """Sine distance when the runs sweep coefficient pairs, sample size otherwise."""
    return sine_column if frame[sine_column].notna().any() and frame[sine_column].nunique() > 1 else n_column


def _aggregate_series(aggregate: pd.DataFrame, panel: str, models: Sequence[str], value: str) -> list[FigureSeries]:
    x_column = _x_axis(aggregate, "n", "Sine Distance")
    series = []
    for (design, model), group in aggregate[aggregate["Model"].isin(models)].groupby(["Design", "Model"], sort=True):
        group = group.sort_values([x_column, "Cell"])
        y = group[value].abs() if value == "Bias" else group[value]
        series.append(
            FigureSeries(
                label=f"{design} {model}",
                x=group[x_column].astype(float).tolist(),
                y=y.astype(float).tolist(),
                grouping={"panel": panel, "design": design, "metric": value.lower(), "model": model, "x_axis": x_column},
            )
        )
    return series


def _imbalance_series(imbalance: pd.DataFrame, panel: str, metrics: Sequence[str]) -> list[FigureSeries]:
    x_column = _x_axis(imbalance, "n", "sine_distance")
    series = []
    selected = imbalance[imbalance["metric"].isin(metrics)]
    for (design, metric), group in selected.groupby(["design", "metric"], sort=True):
        group = group.sort_values([x_column, "cell"])
        series.append(
            FigureSeries(
                label=f"{design} {metric}",
                x=group[x_column].astype(float).tolist(),
                y=group["value"].astype(float).tolist(),
                grouping={"panel": panel, "design": design, "metric": metric, "x_axis": x_column},
            )
        )
    return series


def _dimensionality_series(aggregate: pd.DataFrame) -> list[FigureSeries]:
    series = []
    for (design, model), group in aggregate.groupby(["Design", "Model"], sort=True):
        group = group.sort_values("Cell")
        columns = {
            "bias": group["Bias"].abs(),
            "variance": group["SD"] ** 2,
            "mse": group["MSE"],
        }
        for metric, values in columns.items():
            series.append(
                FigureSeries(
                    label=f"{design} {model} {metric}",
                    x=group["n"].astype(float).tolist(),
                    y=values.astype(float).tolist(),
                    grouping={"panel": "error_decomposition", "design": design, "metric": metric, "model": model},
                )
            )
    return series


def _model_spread_series(model_dependence: pd.DataFrame) -> list[FigureSeries]:
    """Replication means of the enumerated-model variance and maximum per design."""
    if model_dependence.empty:
        return []
    x_column = _x_axis(model_dependence, "n", "sine_distance")
    means = model_dependence.groupby(["design", x_column], sort=True)[["estimate_variance", "max_estimate"]].mean()
    series = []
    for design, group in means.groupby(level="design", sort=True):
        x = group.index.get_level_values(x_column).astype(float).tolist()
        for metric in ("estimate_variance", "max_estimate"):
            series.append(
                FigureSeries(
                    label=f"{design} {metric}",
                    x=x,
                    y=group[metric].astype(float).tolist(),
                    grouping={"panel": "model_spread", "design": design, "metric": metric, "x_axis": x_column},
                )
            )
    return series


def resolve_figure(figure: str) -> str:
    figure = FIGURE_ALIASES.get(figure, figure)
    if figure not in FIGURES:
        choices = ", ".join([*FIGURES, *FIGURE_ALIASES])
        raise InvalidParameter(f"Unknown figure {figure!r}; choose from {choices}")
    return figure


def figure_series(run_dirs: Sequence[str | Path], figure: str) -> list[FigureSeries]:
    """
    Build the series of one figure from completed runs.

    balance (fig1): |bias| of the unadjusted model, cross-replication imbalance
        and between-group Mahalanobis distance per design
    model_dependence (fig2): |bias| of the unadjusted and linear models per
        design, plus the enumerated-model spread when the runs swept models
    dimensionality (fig3): |bias|, variance and MSE per design and model
    imbalance_vs_n: cross-replication imbalance, between-group Mahalanobis
        distance and matched cohort sizes against sample size
    """
    figure = resolve_figure(figure)
    if figure == "balance":
        aggregate = _read_run_table(run_dirs, "aggregate")
        imbalance = _read_run_table(run_dirs, "imbalance")
        return (
            _aggregate_series(aggregate, "unadjusted_bias", [UNADJUSTED], "Bias")
            + _imbalance_series(imbalance, "cross_replication", ["cross_replication"])
            + _imbalance_series(imbalance, "group_mahalanobis", ["group_mahalanobis"])
        )
    if figure == "model_dependence":
        aggregate = _read_run_table(run_dirs, "aggregate")
        model_dependence = _read_run_table(run_dirs, "model_dependence")
        return _aggregate_series(aggregate, "model_bias", [UNADJUSTED, LINEAR], "Bias") + _model_spread_series(
            model_dependence
        )
    if figure == "dimensionality":
        return _dimensionality_series(_read_run_table(run_dirs, "aggregate"))
    imbalance = _read_run_table(run_dirs, "imbalance")
    return (
        _imbalance_series(imbalance, "imbalance", ["cross_replication", "group_mahalanobis"])
        + _imbalance_series(imbalance, "matched_size", ["matched_treated", "matched_control"])
    )


def emit_figure_data(
    run_dirs: Sequence[str | Path], figure: str, output_dir: Optional[str | Path] = None
) -> list[Path]:
    """Write one long-format CSV per panel of a figure; returns the written paths."""
    figure = resolve_figure(figure)
    series = figure_series(run_dirs, figure)
    output_dir = Path(output_dir) if output_dir is not None else Path(run_dirs[0]) / "figures"
    output_dir.mkdir(parents=True, exist_ok=True)
    if not series:
        logger.warning(f"No data for figure {figure}")
        return []
    table = pd.concat([s.to_frame() for s in series], ignore_index=True)
    paths = []
    for panel, group in table.groupby("panel", sort=True):
        path = output_dir / f"{figure}_{panel}.csv"
        group.drop(columns="panel").to_csv(path, index=False, lineterminator="\n")
        paths.append(path)
    logger.info(f"Figure {figure}: wrote {len(paths)} panel file(s) to {output_dir}")
    return paths


def load_cutpoints(path: str | Path, p: int) -> CoarseningSpec:
    """
    Per-covariate cutpoints from a KEY=value file (``x2=3.5,4.5``). Covariates
    that are not listed get Sturges bins.
    """
    path = Path(path)
    if not path.is_file():
        raise InvalidParameter(f"Cutpoints file not found: {path}")
    entries = {k.lower(): v for k, v in dotenv_values(path).items() if v}
    unknown = set(entries) - {f"x{j + 1}" for j in range(p)}
    if unknown:
        raise SchemaError(f"Cutpoints for unknown covariates: {sorted(unknown)}")
    rules = []
    for j in range(p):
        text = entries.get(f"x{j + 1}")
        try:
            rules.append(Cutpoints(tuple(float(v) for v in text.split(","))) if text else AutoSturges())
        except ValueError:
            raise InvalidParameter(f"Unreadable cutpoints for x{j + 1}: {text!r}") from None
    return CoarseningSpec(tuple(rules))


def match_user_data(
    csv_path: str | Path,
    output_dir: str | Path,
    psm: bool = True,
    caliper_multiplier: Optional[float] = None,
    cem: Optional[str] = None,
    cutpoints_path: Optional[str | Path] = None,
    mode: Literal["weights", "one_to_one"] = "weights",
    estimators: Sequence[str] = (UNADJUSTED, LINEAR),
) -> dict[str, MatchResult]:
    """
    Match a user dataset with the requested designs and write, per design,
    the match table, a before/after balance table and the effect estimates.

    Args:
        csv_path: Dataset with header y,w,x1..xp
        output_dir: Directory for the output tables
        psm: Run propensity-score matching
        caliper_multiplier: PSM caliper in SDs of the logit score
        cem: Coarsening rule for CEM ("auto", "k3", "cutpoints"), None to skip
        cutpoints_path: KEY=value cutpoints file when cem is "cutpoints"
        mode: CEM weighting or within-stratum 1:1 matching
        estimators: Outcome models to fit, from "unadjusted" and "linear"

    Returns:
        MatchResult per design name
    """
    data = Dataset.read_csv(csv_path)
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    designs: dict[str, MatchResult] = {}
    if psm:
        designs[PSM] = PropensityMatcher(caliper_multiplier=caliper_multiplier).match(data)[0]
    if cem is not None:
        if cem == "cutpoints":
            if cutpoints_path is None:
                raise InvalidParameter("CEM with cutpoints needs a cutpoints file")
            spec, name = load_cutpoints(cutpoints_path, data.p), "CEM-cutpoints"
        else:
            rule = parse_rule(cem)
            spec = CoarseningSpec.uniform(rule)
            name = {"auto": CEM_AUTO, "k3": CEM_K3}.get(rule.label, f"CEM-{rule.label}")
        match, coarsened = CoarseningMatcher(spec, mode).match(data)
        designs[name] = match
        coarsening_report(coarsened, data.covariate_names).to_csv(
            output_dir / f"{name}_coarsening.csv", index=False, lineterminator="\n"
        )
    if not designs:
        raise InvalidParameter("No design requested; pass --psm and/or --cem")

    unknown = set(estimators) - {UNADJUSTED, LINEAR}
    if unknown:
        raise InvalidParameter(f"User datasets support the unadjusted and linear models, not {sorted(unknown)}")
    models = [ModelSpec.unadjusted() if e == UNADJUSTED else ModelSpec.linear(data.p) for e in estimators]

    for name, match in designs.items():
        match.write_csv(output_dir / f"{name}_match.csv")
        if match.is_empty:
            raise EmptyMatch(f"{name} retained no matched units from one of the groups; nothing to estimate")
        balance_comparison(data, match, metrics=BALANCE_METRICS).to_csv(
            output_dir / f"{name}_balance.csv", index=False, lineterminator="\n"
        )
        records = [estimate(match, data, model) for model in models]
        records_frame(records).assign(design=name).to_csv(
            output_dir / f"{name}_estimates.csv", index=False, lineterminator="\n"
        )
        logger.info(f"{name}: {match.matched_treated}/{match.m_T} treated retained")
    return designs


def audit_balance(
    csv_path: str | Path, match_path: str | Path, output_path: Optional[str | Path] = None
) -> pd.DataFrame:
    """Before/after balance of an existing match table against its dataset."""
    data = Dataset.read_csv(csv_path)
    match = MatchResult.read_csv(match_path, data.W)
    if match.design_label == UNMATCHED:
        logger.warning("Match table has no pairs or strata; comparing the full sample with itself")
    table = balance_comparison(data, match, metrics=BALANCE_METRICS)
    if output_path is not None:
        table.to_csv(output_path, index=False, lineterminator="\n")
    return table
