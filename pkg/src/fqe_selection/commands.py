"""Command handlers for CLI operations."""

import logging
from pathlib import Path
from typing import Any, Literal

import click
import numpy as np
from pydantic import ValidationError

from fqe_selection.datasets import (
    feature_map_by_name,
    fit_feature_normalization,
    load_dataset,
    sample_dataset,
    save_dataset,
    split_dataset,
)
from fqe_selection.environments import discrimination_benchmark, garnet, inventory_chain
from fqe_selection.exceptions import ConfigurationError, InvalidArgumentError
from fqe_selection.experiment import (
    ExperimentConfig,
    MethodComparison,
    RateCheck,
    RunResult,
    compare_methods,
    evaluation_policy,
    load_experiment_config,
    rate_check,
    run_experiment,
)
from fqe_selection.kernels import parse_kernel_spec
from fqe_selection.mdp import HorizonSpec, TabularMdp, load_mdp, save_mdp
from fqe_selection.operators import build_candidate_set, default_candidate_specs, load_candidate_manifest
from fqe_selection.oracles import annotate_report
from fqe_selection.results import emit_results, format_report, read_results_csv
from fqe_selection.selection import (
    FIXED_POINT_METHODS,
    KERNEL_METHODS,
    FixedPointConfig,
    MethodName,
    SelectionReport,
    run_candidates,
    run_method,
)

logger = logging.getLogger(__name__)

EnvironmentKind = Literal['garnet', 'chain', 'benchmark']


def _read_mdp(path: Path) -> TabularMdp:
    try:
        return load_mdp(path)
    except OSError as exc:
        msg = f'cannot read MDP document {path}: {exc}'
        raise ConfigurationError(msg) from exc


def generate_mdp(kind: EnvironmentKind, out: Path, n_states: int = 6, n_actions: int = 2, seed: int = 0) -> TabularMdp:
    """Generate a synthetic MDP and write it as an MDP document.

    Args:
        kind: 'garnet', 'chain' (inventory chain with default parameters) or 'benchmark'
        out: Output path
        n_states: Garnet state count
        n_actions: Garnet action count
        seed: Garnet seed

    Returns:
        The generated MDP

    """
    try:
        if kind == 'garnet':
            mdp = garnet(n_states, n_actions, branching=min(3, n_states), seed=seed)
        elif kind == 'chain':
            mdp = inventory_chain()
        else:
            mdp = discrimination_benchmark(seed)
    except InvalidArgumentError as exc:
        msg = f'invalid environment: {exc}'
        raise ConfigurationError(msg) from exc
    save_mdp(mdp, out)
    click.echo(f'Wrote {kind} MDP ({mdp.n_states} states, {mdp.n_actions} actions) to {out}')
    return mdp


def generate_dataset(mdp_path: Path, out: Path, n: int, seed: int = 0) -> None:
    """Sample n transitions under the uniform behavior distribution and write them as JSONL."""
    mdp = _read_mdp(mdp_path)
    mu = np.full(mdp.n_states * mdp.n_actions, 1.0 / (mdp.n_states * mdp.n_actions))
    try:
        dataset = sample_dataset(mdp, mu, n, seed, mu_spec='uniform')
    except InvalidArgumentError as exc:
        raise ConfigurationError(str(exc)) from exc
    save_dataset(dataset, out)
    click.echo(f'Wrote {n} transitions ({dataset.fingerprint()}) to {out}')


def _check_select_options(
    method: MethodName, kernel: str | None, train_fraction: float, eps_eval: float, h_star: int | None
) -> None:
    if not 0.0 < train_fraction < 1.0:
        msg = f'train fraction must lie in (0, 1), got {train_fraction}'
        raise ConfigurationError(msg)
    if method in KERNEL_METHODS and kernel is None:
        msg = f'{method} needs a kernel'
        raise ConfigurationError(msg)
    if not 0.0 <= eps_eval <= 1.0:
        msg = f'evaluation mixture must lie in [0, 1], got {eps_eval}'
        raise ConfigurationError(msg)
    if h_star is not None and h_star < 1:
        msg = f'fixed-point budget must be positive, got {h_star}'
        raise ConfigurationError(msg)


def run_select(
    mdp_path: Path,
    dataset_path: Path,
    method: MethodName,
    horizon_text: str,
    gamma: float,
    eps_eval: float = 0.0,
    kernel: str | None = None,
    candidates: Path | None = None,
    train_fraction: float = 0.5,
    seed: int = 0,
    h_star: int | None = None,
    workers: int = 1,
) -> SelectionReport:
    """Select among candidate operators on a saved dataset and annotate the choice against the MDP.

    The dataset is split into a fitting and a validation part; candidates
    come from ``candidates`` or the default grid. RM-FP and KLM-FP fit their
    candidates for the infinite-horizon problem with the same discount.

    Returns:
        The annotated selection report

    Raises:
        ConfigurationError: If an input file is missing or malformed, a numeric option is out of range,
            or a kernel method has no valid kernel

    """
    try:
        horizon = HorizonSpec.parse(horizon_text, gamma)
    except ValueError as exc:
        msg = f'invalid horizon {horizon_text!r} with gamma {gamma}: {exc}'
        raise ConfigurationError(msg) from exc
    _check_select_options(method, kernel, train_fraction, eps_eval, h_star)
    mdp = _read_mdp(mdp_path)
    try:
        dataset = load_dataset(dataset_path)
    except OSError as exc:
        msg = f'cannot read dataset {dataset_path}: {exc}'
        raise ConfigurationError(msg) from exc
    specs = load_candidate_manifest(candidates) if candidates is not None else default_candidate_specs()
    mu = dataset.mu if dataset.mu is not None else np.full(mdp.shape, 1.0 / (mdp.n_states * mdp.n_actions))

    train, valid = split_dataset(dataset, train_fraction, seed)
    policy = evaluation_policy(mdp, horizon, eps_eval)
    bound_kernel = None
    if kernel is not None:
        features = fit_feature_normalization(feature_map_by_name('index', mdp.n_states, mdp.n_actions), train)
        try:
            bound_kernel = parse_kernel_spec(kernel).bind(features)
        except InvalidArgumentError as exc:
            raise ConfigurationError(str(exc)) from exc

    if method in FIXED_POINT_METHODS:
        fp_horizon = HorizonSpec(None, horizon.gamma)
        cfg = FixedPointConfig(h_star) if h_star is not None else FixedPointConfig.for_sample_size(len(dataset))
        cset = build_candidate_set(specs, train, policy, fp_horizon, mdp=mdp, workers=workers, seed=seed)
        runs = run_candidates(cset, cfg=cfg, workers=workers)
        report = run_method(method, cset, valid, policy, cfg=cfg, k=bound_kernel, runs=runs)
    else:
        cset = build_candidate_set(specs, train, policy, horizon, mdp=mdp, workers=workers, seed=seed)
        runs = run_candidates(cset, horizon=horizon, workers=workers)
        report = run_method(method, cset, valid, policy, horizon=horizon, k=bound_kernel, runs=runs)
    return annotate_report(report, cset, runs, mdp, policy, mu, len(valid), kernel=bound_kernel)


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    """Revalidate ``cfg`` with the non-None entries of ``overrides`` replacing its fields."""
    updates = {key: value for key, value in overrides.items() if value is not None}
    if not updates:
        return cfg
    try:
        return ExperimentConfig.model_validate({**cfg.model_dump(), **updates})
    except ValidationError as exc:
        msg = f'Invalid experiment configuration: {exc}'
        raise ConfigurationError(msg) from exc


def run_sweep(
    config_path: Path, out_dir: Path, overrides: dict[str, Any] | None = None, workers: int | None = None
) -> list[RunResult]:
    """Run the configured sweep and emit its results.

    Args:
        config_path: Experiment configuration file
        out_dir: Output directory for results.csv, summary.json and plotdata/
        overrides: Configuration fields set from command-line flags
        workers: Worker count used when neither the flags nor the file set one

    Returns:
        The result rows

    """
    cfg = apply_overrides(load_experiment_config(config_path), overrides or {})
    results = run_experiment(cfg, workers=cfg.workers or workers)
    emit_results(results, out_dir)
    failed = sum(row.status == 'failed' for row in results)
    click.echo(f'{len(results)} rows ({failed} failed) written to {out_dir}')
    return results


def run_rate_check(results_path: Path, method: str = 'RM', kernel: str = '', min_seeds: int = 10) -> RateCheck:
    """Fit the excess-MAE decay rate of one series in a results file."""
    check = rate_check(read_results_csv(results_path), method=method, kernel=kernel, min_seeds=min_seeds)
    for n, median in zip(check.n_values, check.medians, strict=True):
        click.echo(f'n={n}: median excess MAE {median:.6g}')
    if check.slope is None:
        click.echo('slope: floor (all medians are zero)')
    else:
        click.echo(f'slope: {check.slope:.4f}')
    return check


def build_report(results_path: Path, eps: float | None = None) -> MethodComparison | None:
    """Print the method table, the aggregates and, with ``eps``, the RM vs worst-KLM comparison."""
    results = read_results_csv(results_path)
    click.echo(format_report(results), nl=False)
    if eps is None:
        return None
    comparison = compare_methods(results, eps)
    click.echo(
        f'\neps_eval={eps}: RM {comparison.rm_mean:.4g} +/- {comparison.rm_sd:.4g}, '
        f'worst KLM ({comparison.worst_kernel}) {comparison.worst_mean:.4g} +/- {comparison.worst_sd:.4g}, '
        f'gap {comparison.gap:.4g} vs pooled SE {comparison.pooled_se:.4g}'
    )
    return comparison
