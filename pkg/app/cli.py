# app/cli.py
"""Command-line entry point: ``matchlab <command>``."""

import sys
from functools import wraps
from pathlib import Path

import click
import uvicorn

from app import __version__
from app.core.config import settings
from app.core.errors import EXIT_OK, MatchingLabError
from app.core.logging import configure_logging
from app.services.estimators import random_covariate_subsets, verify_matched_consistency
from app.services.experiments import REPRODUCTIONS, run_reproductions
from app.services.harness import FIGURE_ALIASES, FIGURES, audit_balance, emit_figure_data, match_user_data, run_scenario
from app.services.scenario import CEM_AUTO, CEM_K3, PSM, load_scenario_config


def exits_on_error(command):
    """Print MatchingLabError messages to stderr and exit with their code."""

    @wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except MatchingLabError as e:
            click.echo(f"Error ({type(e).__name__}): {e}", err=True)
            sys.exit(e.exit_code)

    return wrapper


@click.group()
@click.version_option(__version__, prog_name="matchlab")
@click.option(
    "--log-level",
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
    default=None,
    help="Overrides LOG_LEVEL from the environment.",
)
def cli(log_level):
    """Propensity-score and coarsened exact matching experiments."""
    configure_logging((log_level or settings.LOG_LEVEL).upper())


@cli.command()
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--workers", type=click.IntRange(min=1), default=None, help="Worker processes.")
@click.option("--full", is_flag=True, help="Large-scale replications, pairs and oracle draws.")
@click.option("--out", "output_dir", type=click.Path(file_okay=False), default=None, help="Run directory.")
@click.option("--replications", type=click.IntRange(min=2), default=None, help="Replication count override.")
@exits_on_error
def simulate(config, workers, full, output_dir, replications):
    """Run a scenario file and write its tables."""
    if output_dir is None:
        output_dir = Path(settings.OUTPUT_DIR) / load_scenario_config(config).scenario_id
    manifest = run_scenario(config, output_dir, workers=workers, full=full, replications=replications)
    click.echo(
        f"{manifest.scenario_id}: {manifest.cell_count} cell(s) x {manifest.replication_count} replications, "
        f"{manifest.failure_count} failed estimates, {manifest.wall_clock_seconds:.1f}s -> {output_dir}"
    )


@cli.command()
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path(file_okay=False))
@click.option(
    "--which", "figure", type=click.Choice([*FIGURES, *FIGURE_ALIASES]), required=True, help="Figure to build."
)
@click.option("--out", "output_dir", type=click.Path(file_okay=False), default=None, help="Output directory.")
@exits_on_error
def figures(run_dirs, figure, output_dir):
    """Write plot-ready tables for one figure from completed runs."""
    for path in emit_figure_data(run_dirs, figure, output_dir):
        click.echo(str(path))


@cli.command()
@click.argument("csv_path", type=click.Path(dir_okay=False))
@click.argument("cutpoints_file", required=False, type=click.Path(dir_okay=False))
@click.option("--psm/--no-psm", default=True, help="Run propensity-score matching.")
@click.option("--caliper", type=click.FloatRange(min=0, min_open=True), default=None, help="Caliper in logit SDs.")
@click.option(
    "--cem", type=str, default=None, help="Coarsening: auto, k3, fixed:K, or cutpoints followed by a KEY=value file."
)
@click.option(
    "--cutpoints", "cutpoints_path", type=click.Path(dir_okay=False), default=None, help="KEY=value cutpoints file."
)
@click.option("--mode", type=click.Choice(["weights", "one_to_one"]), default="weights", help="CEM weighting mode.")
@click.option("--out", "output_dir", type=click.Path(file_okay=False), default=".", help="Output directory.")
@exits_on_error
def match(csv_path, cutpoints_file, psm, caliper, cem, cutpoints_path, mode, output_dir):
    """Match a y,w,x1..xp dataset and write match, balance and estimate tables."""
    if cutpoints_file is not None:
        if cem != "cutpoints" or cutpoints_path is not None:
            raise click.UsageError(f"Unexpected argument {cutpoints_file!r}; a file follows only --cem cutpoints")
        cutpoints_path = cutpoints_file
    results = match_user_data(csv_path, output_dir, psm, caliper, cem, cutpoints_path, mode)
    for name, result in results.items():
        click.echo(f"{name}: {result.matched_treated}/{result.m_T} treated, {result.matched_control}/{result.m_C} controls")


@cli.command()
@click.argument("csv_path", type=click.Path(dir_okay=False))
@click.argument("match_path", type=click.Path(dir_okay=False))
@click.option("--out", "output_path", type=click.Path(dir_okay=False), default=None, help="CSV to write.")
@exits_on_error
def balance(csv_path, match_path, output_path):
    """Before/after balance of a match table."""
    table = audit_balance(csv_path, match_path, output_path)
    if output_path is None:
        click.echo(table.to_csv(index=False, lineterminator="\n"), nl=False)


@cli.command()
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--subsets", "subset_count", type=click.IntRange(min=1), default=8, help="Covariate subsets to test.")
@click.option("--n", type=click.IntRange(min=10), default=None, help="Sample size override.")
@click.option("--replications", type=click.IntRange(min=2), default=None, help="Replication count override.")
@click.option("--caliper", type=click.FloatRange(min=0, min_open=True), default=None, help="Caliper in logit SDs.")
@click.option("--design", type=click.Choice([PSM, CEM_AUTO, CEM_K3]), default=PSM, help="Matching design.")
@click.option("--workers", type=click.IntRange(min=1), default=1, help="Worker processes.")
@exits_on_error
def consistency(config, subset_count, n, replications, caliper, design, workers):
    """Bias of the W coefficient across covariate subsets on tightly matched data."""
    scenario = load_scenario_config(config)
    subsets = random_covariate_subsets(scenario.p, subset_count, seed=scenario.seed)
    results = verify_matched_consistency(scenario, subsets, n, replications, caliper, design, workers)
    click.echo("subset,bias,bias_se,sd,rmse,failures")
    for result in results:
        label = " ".join(f"x{j + 1}" for j in result.subset) or "none"
        m = result.metrics
        click.echo(f"{label},{m.bias:.6f},{m.bias_standard_error:.6f},{m.sd:.6f},{m.rmse:.6f},{m.failure_count}")


cli.add_command(consistency, name="prop1")


@cli.command()
@click.option(
    "--which",
    "names",
    type=click.Choice(["all", *REPRODUCTIONS]),
    multiple=True,
    default=["all"],
    help="Checks to run (repeatable).",
)
@click.option("--workers", type=click.IntRange(min=1), default=1, help="Worker processes.")
@click.option("--out", "output_path", type=click.Path(dir_okay=False), default=None, help="CSV of statistics.")
@exits_on_error
def reproduce(names, workers, output_path):
    """Desk-scale reproductions of the simulation findings."""
    names = list(REPRODUCTIONS) if "all" in names else list(dict.fromkeys(names))
    results = run_reproductions(names, workers, output_path)
    for result in results:
        click.echo(f"{'PASS' if result.passed else 'FAIL'} {result.name}")
        for key, value in result.statistics.items():
            click.echo(f"    {key} = {value:.6g}")
    sys.exit(EXIT_OK if all(r.passed for r in results) else 1)


@cli.command()
@click.option("--host", default="127.0.0.1", help="Bind address.")
@click.option("--port", type=click.IntRange(1, 65535), default=8000, help="Bind port.")
@click.option("--reload", is_flag=True, help="Restart on code changes.")
def serve(host, port, reload):
    """Serve the HTTP API."""
    uvicorn.run("app.main:app", host=host, port=port, reload=reload, log_level=settings.LOG_LEVEL.lower())


if __name__ == "__main__":
    cli()
