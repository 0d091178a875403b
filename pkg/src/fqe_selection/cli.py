"""CLI interface for fqe-selection."""

from collections.abc import Callable
from pathlib import Path
from typing import TypeVar, get_args

import click

from fqe_selection.commands import (
    build_report,
    generate_dataset,
    generate_mdp,
    run_rate_check,
    run_select,
    run_sweep,
)
from fqe_selection.exceptions import ConfigurationError, FqeSelectionError
from fqe_selection.experiment import all_rows_violate_assumption
from fqe_selection.selection import MethodName
from fqe_selection.settings import Settings, configure_logging, load_settings


class ConfigError(click.ClickException):
    """Invalid configuration or input files."""

    exit_code = 2


class AllRowsViolateError(click.ClickException):
    """Every sweep row failed because the evaluation policy left the data support."""

    exit_code = 3


T = TypeVar('T')


def _parse_list(text: str | None, kind: Callable[[str], T]) -> list[T] | None:
    if text is None:
        return None
    try:
        return [kind(item.strip()) for item in text.split(',') if item.strip()]
    except ValueError as exc:
        msg = f'cannot parse {text!r} as a comma-separated list'
        raise ConfigError(msg) from exc


@click.group()
@click.pass_context
def cli(ctx: click.Context) -> None:
    """Fqesel - Hyperparameter selection for fitted Q-evaluation."""
    try:
        settings = load_settings()
    except ConfigurationError as exc:
        raise ConfigError(str(exc)) from exc
    configure_logging(settings)
    ctx.obj = settings


@cli.group()
def generate() -> None:
    """Generate synthetic MDPs and datasets."""


@generate.command('mdp')
@click.argument('out', type=click.Path(dir_okay=False, path_type=Path))
@click.option('--kind', type=click.Choice(['garnet', 'chain', 'benchmark']), default='garnet', help='MDP family')
@click.option('--n-states', default=6, help='Garnet state count')
@click.option('--n-actions', default=2, help='Garnet action count')
@click.option('--seed', default=0, help='Generator seed')
def generate_mdp_command(out: Path, kind: str, n_states: int, n_actions: int, seed: int) -> None:
    """Write a synthetic MDP document to OUT."""
    try:
        generate_mdp(kind, out, n_states=n_states, n_actions=n_actions, seed=seed)  # type: ignore[arg-type]
    except ConfigurationError as exc:
        raise ConfigError(str(exc)) from exc


@generate.command('dataset')
@click.argument('mdp', type=click.Path(dir_okay=False, path_type=Path))
@click.argument('out', type=click.Path(dir_okay=False, path_type=Path))
@click.option('--n', 'n', default=480, help='Number of transitions')
@click.option('--seed', default=0, help='Sampling seed')
def generate_dataset_command(mdp: Path, out: Path, n: int, seed: int) -> None:
    """Sample a dataset from MDP under the uniform behavior distribution."""
    try:
        generate_dataset(mdp, out, n, seed=seed)
    except ConfigurationError as exc:
        raise ConfigError(str(exc)) from exc


@cli.command()
@click.argument('mdp', type=click.Path(dir_okay=False, path_type=Path))
@click.argument('dataset', type=click.Path(dir_okay=False, path_type=Path))
@click.option('--method', type=click.Choice(get_args(MethodName)), default='RM', help='Selection method')
@click.option('--horizon', default='5', help="Episode length, or 'inf'")
@click.option('--gamma', default=1.0, help='Discount factor')
@click.option('--eps', default=0.0, help='Weight of the uniform policy in the evaluation mixture')
@click.option('--kernel', default=None, help="Kernel spec for KLM and KLM-FP, e.g. 'exp:p=1:sigma=1'")
@click.option('--candidates', type=click.Path(dir_okay=False, path_type=Path), help='Candidate manifest')
@click.option('--train-fraction', default=0.5, help='Share of records used for fitting')
@click.option('--seed', default=0, help='Split and fitting seed')
@click.option('--h-star', type=int, default=None, help='Fixed-point budget')
@click.pass_obj
def select(
    settings: Settings,
    mdp: Path,
    dataset: Path,
    method: MethodName,
    horizon: str,
    gamma: float,
    eps: float,
    kernel: str | None,
    candidates: Path | None,
    train_fraction: float,
    seed: int,
    h_star: int | None,
) -> None:
    """Select a candidate operator for DATASET and check it against MDP."""
    try:
        report = run_select(
            mdp,
            dataset,
            method,
            horizon,
            gamma,
            eps_eval=eps,
            kernel=kernel,
            candidates=candidates,
            train_fraction=train_fraction,
            seed=seed,
            h_star=h_star,
            workers=settings.workers,
        )
    except ConfigurationError as exc:
        raise ConfigError(str(exc)) from exc
    except FqeSelectionError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(report.model_dump_json(indent=2, exclude={'selected_q'}))


@cli.command()
@click.argument('config', type=click.Path(dir_okay=False, path_type=Path))
@click.option('--out', type=click.Path(file_okay=False, path_type=Path), default=Path('results'), help='Output dir')
@click.option('--seeds', default=None, help='Comma-separated master seeds')
@click.option('--n-grid', default=None, help='Comma-separated dataset sizes')
@click.option('--eps-grid', default=None, help='Comma-separated evaluation mixtures')
@click.option('--delta', type=float, default=None, help='Confidence of the deviation terms')
@click.option('--train-fraction', type=float, default=None, help='Share of records used for fitting')
@click.option('--workers', type=int, default=None, help='Grid-point worker threads')
@click.option('--record-timing/--no-record-timing', default=None, help='Record wall time per row')
@click.pass_obj
def sweep(
    settings: Settings,
    config: Path,
    out: Path,
    seeds: str | None,
    n_grid: str | None,
    eps_grid: str | None,
    delta: float | None,
    train_fraction: float | None,
    workers: int | None,
    record_timing: bool | None,  # noqa: FBT001
) -> None:
    """Run the experiment in CONFIG and write results.csv, summary.json and plotdata/."""
    overrides = {
        'seeds': _parse_list(seeds, int),
        'n_grid': _parse_list(n_grid, int),
        'eval_eps_grid': _parse_list(eps_grid, float),
        'delta': delta,
        'train_fraction': train_fraction,
        'workers': workers,
        'record_timing': record_timing,
    }
    try:
        results = run_sweep(config, out, overrides=overrides, workers=settings.workers)
    except ConfigurationError as exc:
        raise ConfigError(str(exc)) from exc
    if all_rows_violate_assumption(results):
        msg = 'every row failed: the evaluation policy leaves the support of the data distribution'
        raise AllRowsViolateError(msg)


@cli.command('rate-check')
@click.argument('results', type=click.Path(dir_okay=False, path_type=Path))
@click.option('--method', default='RM', help='Method whose series is fitted')
@click.option('--kernel', default='', help='Kernel spec of the series')
@click.option('--min-seeds', default=10, help='Rows required per dataset size')
def rate_check_command(results: Path, method: str, kernel: str, min_seeds: int) -> None:
    """Fit the log-log slope of the median excess MAE against n in RESULTS."""
    try:
        run_rate_check(results, method=method, kernel=kernel, min_seeds=min_seeds)
    except ConfigurationError as exc:
        raise ConfigError(str(exc)) from exc
    except FqeSelectionError as exc:
        raise click.ClickException(str(exc)) from exc


@cli.command()
@click.argument('results', type=click.Path(dir_okay=False, path_type=Path))
@click.option('--eps', type=float, default=None, help='Compare RM with the worst KLM kernel at this mixture')
def report(results: Path, eps: float | None) -> None:
    """Print the method comparison table and the aggregates of RESULTS."""
    try:
        build_report(results, eps)
    except ConfigurationError as exc:
        raise ConfigError(str(exc)) from exc
    except FqeSelectionError as exc:
        raise click.ClickException(str(exc)) from exc
