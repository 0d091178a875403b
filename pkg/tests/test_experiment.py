"""Tests for experiment configuration, the sweep runner and result analysis."""

import json
import math
from pathlib import Path
from typing import Any

import numpy as np
import pytest

from fqe_selection.datasets import index_features, sample_dataset
from fqe_selection.environments import discrimination_benchmark
from fqe_selection.exceptions import ConfigurationError, InvalidArgumentError
from fqe_selection.experiment import (
    METHOD_PROPERTIES,
    ExperimentConfig,
    RunResult,
    all_rows_violate_assumption,
    behavior_distribution,
    build_environment,
    compare_methods,
    evaluation_policy,
    grid_points,
    load_experiment_config,
    mean_and_sd,
    method_rows,
    parse_experiment_config,
    rate_check,
    run_experiment,
)
from fqe_selection.mdp import HorizonSpec, TabularMdp, dump_mdp, uniform_policy
from fqe_selection.operators import CandidateSet, ExactBellmanOperator, ShiftedOperator, default_candidate_specs
from fqe_selection.selection import (
    FIXED_POINT_METHODS,
    KERNEL_METHODS,
    FixedPointConfig,
    MethodName,
    run_candidates,
    run_method,
)
from fqe_selection.kernels import EXPONENTIAL_KERNEL_GRID, parse_kernel_spec


def _config(**overrides: Any) -> dict[str, Any]:
    config: dict[str, Any] = {
        'environment': {'kind': 'garnet', 'n_states': 4, 'n_actions': 2, 'branching': 2, 'seed': 7},
        'eval_eps_grid': [1.0, 0.5],
        'n_grid': [40],
        'horizons': [{'horizon': 3, 'gamma': 1.0}],
        'methods': [{'method': 'RM'}, {'method': 'KLM', 'kernels': ['exp:p=1:sigma=1', 'const']}],
        'candidates': [
            {'id': 'tabular', 'kind': 'tabular_mean'},
            {'id': 'shifted', 'kind': 'constant_shift', 'params': {'base': 'tabular', 'shift': 0.5}},
        ],
        'seeds': [0, 1],
    }
    config.update(overrides)
    return config


def _parse(**overrides: Any) -> ExperimentConfig:
    return parse_experiment_config(json.dumps(_config(**overrides)))


def _rows(method: str, excess_by_n: dict[int, list[float]], kernel: str = '') -> list[RunResult]:
    return [
        RunResult(
            seed=seed, method=method, kernel=kernel, n=n, H='3', gamma=1.0, eps_eval=0.0, status='ok', excess_mae=value
        )
        for n, values in excess_by_n.items()
        for seed, value in enumerate(values)
    ]


def test_parse_valid_config() -> None:
    """Test that a complete configuration validates with defaults filled in."""
    cfg = _parse()

    assert cfg.delta == 0.05
    assert cfg.train_fraction == 0.5
    assert cfg.kernel_features == 'index'
    assert not cfg.record_timing
    assert cfg.horizons[0].spec() == HorizonSpec(3, 1.0)
    assert [spec.id for spec in cfg.candidate_specs()] == ['tabular', 'shifted']


@pytest.mark.parametrize(
    'overrides',
    [
        {'methods': [{'method': 'KLM'}]},
        {'methods': [{'method': 'RM', 'kernels': ['const']}]},
        {'methods': [{'method': 'KLM', 'kernels': ['rbf']}]},
        {'candidate_manifest': 'candidates.json'},
        {'behavior': [0.5, 0.6]},
        {'horizons': [{'horizon': None, 'gamma': 1.0}]},
        {'n_grid': [2]},
        {'eval_eps_grid': [1.5]},
        {'surprise': True},
    ],
)
def test_parse_rejects_invalid_configs(overrides: dict[str, Any]) -> None:
    """Test that invalid configurations raise ConfigurationError."""
    with pytest.raises(ConfigurationError):
        _parse(**overrides)


def test_parse_rejects_bad_json() -> None:
    """Test that unparsable text raises ConfigurationError."""
    with pytest.raises(ConfigurationError):
        parse_experiment_config('{"environment": ')


def test_load_experiment_config(tmp_path: Path) -> None:
    """Test reading a configuration file and a missing one."""
    path = tmp_path / 'sweep.json'
    path.write_text(json.dumps(_config()), encoding='utf-8')

    assert load_experiment_config(path).seeds == [0, 1]
    with pytest.raises(ConfigurationError):
        load_experiment_config(tmp_path / 'missing.json')


def test_default_candidates_when_none_given() -> None:
    """Test that a configuration without candidates uses the stock grid."""
    config = _config()
    del config['candidates']

    assert parse_experiment_config(json.dumps(config)).candidate_specs() == default_candidate_specs()


def test_environment_kinds(tmp_path: Path, two_state_mdp: TabularMdp) -> None:
    """Test that garnet, chain, file and inline environments build."""
    path = tmp_path / 'mdp.json'
    path.write_text(dump_mdp(two_state_mdp), encoding='utf-8')

    assert build_environment(_parse()).shape == (4, 2)
    assert build_environment(_parse(environment={'kind': 'chain', 'capacity': 3, 'n_orders': 2})).shape == (4, 2)
    assert build_environment(_parse(environment={'kind': 'file', 'path': str(path)})).shape == (2, 2)
    inline = {'kind': 'inline', 'mdp': json.loads(dump_mdp(two_state_mdp))}
    assert build_environment(_parse(environment=inline)).shape == (2, 2)


def test_environment_errors(tmp_path: Path) -> None:
    """Test that invalid parameters and unreadable files raise ConfigurationError."""
    with pytest.raises(ConfigurationError):
        build_environment(_parse(environment={'kind': 'garnet', 'n_states': 3, 'branching': 5}))
    with pytest.raises(ConfigurationError):
        build_environment(_parse(environment={'kind': 'file', 'path': str(tmp_path / 'missing.json')}))


def test_behavior_distribution(two_state_mdp: TabularMdp) -> None:
    """Test uniform and explicit behavior, and a length mismatch."""
    np.testing.assert_allclose(behavior_distribution(_parse(), two_state_mdp), 0.25)
    explicit = _parse(behavior=[0.1, 0.2, 0.3, 0.4])
    np.testing.assert_array_equal(behavior_distribution(explicit, two_state_mdp), [0.1, 0.2, 0.3, 0.4])
    with pytest.raises(ConfigurationError):
        behavior_distribution(_parse(behavior=[0.5, 0.5]), two_state_mdp)


def test_evaluation_policy_mixture(two_state_mdp: TabularMdp) -> None:
    """Test that eps = 1 is uniform and eps = 0 is the deterministic expert."""
    horizon = HorizonSpec(2, 1.0)

    np.testing.assert_allclose(evaluation_policy(two_state_mdp, horizon, 1.0).action_probs, 0.5)
    expert = evaluation_policy(two_state_mdp, horizon, 0.0).action_probs
    np.testing.assert_array_equal(np.sort(expert, axis=1), [[0.0, 1.0], [0.0, 1.0]])


def test_grid_and_method_rows() -> None:
    """Test the grid order and one row per (method, kernel)."""
    cfg = _parse()
    points = grid_points(cfg)

    assert [(p.seed, p.eps_eval) for p in points] == [(0, 1.0), (0, 0.5), (1, 1.0), (1, 0.5)]
    assert [(spec.method, kernel) for spec, kernel in method_rows(cfg)] == [
        ('RM', ''),
        ('KLM', 'exp:p=1:sigma=1'),
        ('KLM', 'const'),
    ]
    assert len({p.derived_seed for p in points}) == 4


def test_run_experiment_covers_grid_deterministically() -> None:
    """Test row count, success, zero timings and identical reruns across worker counts."""
    cfg = _parse()

    first = run_experiment(cfg)
    second = run_experiment(cfg, workers=3)

    assert len(first) == 2 * 2 * 3
    assert all(row.status == 'ok' for row in first)
    assert all(row.wall_ms == 0.0 for row in first)
    assert all(set(row.scores) == {'tabular', 'shifted'} for row in first)
    assert [row.model_dump() for row in first] == [row.model_dump() for row in second]


def test_run_experiment_records_timing_when_asked() -> None:
    """Test that wall time is recorded only with record_timing."""
    results = run_experiment(_parse(record_timing=True, seeds=[0], eval_eps_grid=[1.0]))

    assert all(row.wall_ms > 0.0 for row in results)


def test_singleton_candidate_set_has_zero_excess() -> None:
    """Test that a single candidate is always selected with zero excess MAE."""
    results = run_experiment(_parse(candidates=[{'id': 'only', 'kind': 'tabular_mean'}]))

    assert {row.selected_id for row in results} == {'only'}
    assert all(row.excess_mae == 0.0 for row in results)


def test_failing_rows_are_isolated() -> None:
    """Test that an undiscounted fixed-point row fails without affecting the others."""
    cfg = _parse(methods=[{'method': 'RM'}, {'method': 'RM-FP'}])

    results = run_experiment(cfg)
    failed = [row for row in results if row.status == 'failed']

    assert {row.method for row in failed} == {'RM-FP'}
    assert all(row.reason.startswith('InvalidHorizonError:') for row in failed)
    assert all(row.selected_id == '' and row.delta_j is None for row in failed)
    assert all(row.status == 'ok' for row in results if row.method == 'RM')
    assert not all_rows_violate_assumption(results)


def test_fixed_point_methods_run_on_discounted_grid() -> None:
    """Test RM-FP and KLM-FP rows with gamma < 1."""
    cfg = _parse(
        horizons=[{'horizon': 3, 'gamma': 0.8}],
        methods=[{'method': 'RM-FP'}, {'method': 'KLM-FP', 'kernels': ['gauss:sigma=1'], 'h_star': 5}],
        seeds=[0],
    )

    results = run_experiment(cfg)

    assert all(row.status == 'ok' for row in results)
    assert all(row.bound_value is not None for row in results)


def test_uncovered_behavior_fails_every_row(two_state_mdp: TabularMdp) -> None:
    """Test that a behavior missing a reachable pair marks every row as an assumption violation."""
    cfg = _parse(
        environment={'kind': 'inline', 'mdp': json.loads(dump_mdp(two_state_mdp))},
        behavior=[0.0, 0.5, 0.25, 0.25],
        eval_eps_grid=[1.0],
    )

    results = run_experiment(cfg)

    assert all(row.status == 'failed' for row in results)
    assert all_rows_violate_assumption(results)
    assert not all_rows_violate_assumption([])


def test_mean_and_sd() -> None:
    """Test the sample statistics helper."""
    assert mean_and_sd([3.0]) == (3.0, 0.0)
    mean, sd = mean_and_sd([1.0, 2.0, 3.0])
    assert (mean, sd) == pytest.approx((2.0, 1.0))


def test_rate_check_recovers_power_law() -> None:
    """Test that excess = 10 n^(-1/4) gives a slope of -1/4."""
    sizes = [256, 1024, 4096, 16384]
    results = _rows('RM', {n: [10.0 * n**-0.25] * 10 for n in sizes})

    check = rate_check(results)

    assert check.n_values == sizes
    assert check.slope == pytest.approx(-0.25, abs=1e-5)
    assert not check.at_floor


def test_rate_check_constant_and_floor() -> None:
    """Test a flat series and an all-zero series."""
    sizes = [100, 200, 400]

    assert rate_check(_rows('RM', {n: [0.3] * 10 for n in sizes})).slope == pytest.approx(0.0, abs=1e-12)
    floor = rate_check(_rows('RM', {n: [0.0] * 10 for n in sizes}))
    assert floor.at_floor
    assert floor.slope is None


def test_rate_check_needs_enough_data() -> None:
    """Test that too few sizes or seeds are refused."""
    with pytest.raises(InvalidArgumentError):
        rate_check(_rows('RM', {100: [0.1] * 10, 200: [0.1] * 10}))
    with pytest.raises(InvalidArgumentError):
        rate_check(_rows('RM', {100: [0.1] * 10, 200: [0.1] * 10, 400: [0.1] * 3}))


def test_rate_check_filters_by_kernel() -> None:
    """Test that only rows of the requested kernel enter the fit."""
    results = _rows('KLM', {n: [1.0] * 10 for n in (10, 20, 40)}, kernel='const')
    results += _rows('KLM', {n: [0.0] * 10 for n in (10, 20, 40)}, kernel='gauss:sigma=1')

    assert rate_check(results, method='KLM', kernel='gauss:sigma=1').at_floor


def test_compare_methods_finds_worst_kernel() -> None:
    """Test the gap between RM and the worst KLM kernel."""
    results = _rows('RM', {100: [0.1, 0.2, 0.3]})
    results += _rows('KLM', {100: [0.5, 0.6, 0.7]}, kernel='exp:p=1:sigma=0.1')
    results += _rows('KLM', {100: [0.2, 0.2, 0.2]}, kernel='exp:p=2:sigma=10')

    comparison = compare_methods(results, 0.0)

    assert comparison.worst_kernel == 'exp:p=1:sigma=0.1'
    assert comparison.gap == pytest.approx(0.4)
    assert comparison.pooled_se == pytest.approx(math.sqrt(0.01 / 3 + 0.01 / 3))
    assert comparison.significant
    with pytest.raises(InvalidArgumentError):
        compare_methods(results, 0.5)


def test_method_properties_cover_every_method() -> None:
    """Test that the properties table lists the four methods once each."""
    assert [row.method for row in METHOD_PROPERTIES] == ['RM', 'KLM', 'RM-FP', 'KLM-FP']


@pytest.mark.slow
@pytest.mark.parametrize('method', ['RM', 'KLM', 'RM-FP', 'KLM-FP'])
def test_methods_discriminate_exact_from_shifted_operator(method: MethodName) -> None:
    """Test that each method picks the exact operator over a +0.5 shift at n = 4096 in at least 95 of 100 seeds."""
    fixed_point = method in FIXED_POINT_METHODS
    horizon = HorizonSpec(None, 0.9) if fixed_point else HorizonSpec(3, 1.0)
    mdp = discrimination_benchmark(seed=0)
    policy = uniform_policy(*mdp.shape)
    mu = np.full(mdp.shape, 1.0 / (mdp.n_states * mdp.n_actions))
    exact = ExactBellmanOperator(mdp, policy, horizon, 'exact')
    cset = CandidateSet((exact, ShiftedOperator(exact, 0.5, 'shifted')))
    k = parse_kernel_spec('exp:p=1:sigma=1').bind(index_features(mdp.n_states, mdp.n_actions))
    cfg = FixedPointConfig.for_sample_size(4096) if fixed_point else None
    runs = run_candidates(cset, None if fixed_point else horizon, cfg)

    wins = sum(
        run_method(
            method,
            cset,
            sample_dataset(mdp, mu, 4096, seed=seed),
            policy,
            horizon=None if fixed_point else horizon,
            cfg=cfg,
            k=k if method in KERNEL_METHODS else None,
            runs=runs,
        ).selected_id
        == 'exact'
        for seed in range(100)
    )

    assert wins >= 95


@pytest.mark.slow
def test_rm_excess_error_shrinks_with_sample_size() -> None:
    """Test that the median excess error of RM falls at least like n^-0.15."""
    cfg = _parse(
        environment={'kind': 'garnet', 'n_states': 5, 'n_actions': 2, 'branching': 2, 'seed': 3},
        behavior='uniform',
        eval_eps_grid=[0.5],
        n_grid=[256, 1024, 4096, 16384],
        methods=[{'method': 'RM'}],
        candidates=None,
        seeds=list(range(20)),
    )

    check = rate_check(run_experiment(cfg), 'RM', min_seeds=20)

    assert check.at_floor or (check.slope is not None and check.slope <= -0.15)


@pytest.mark.slow
def test_rm_beats_worst_kernel_under_policy_mismatch() -> None:
    """Test that with uniform data and a greedy target RM's mean excess error beats the worst KLM kernel."""
    cfg = _parse(
        environment={'kind': 'chain', 'capacity': 5, 'n_orders': 3},
        behavior='uniform',
        eval_eps_grid=[0.0, 0.25, 0.5, 1.0],
        n_grid=[2048],
        horizons=[{'horizon': 5, 'gamma': 1.0}],
        methods=[{'method': 'RM'}, {'method': 'KLM', 'kernels': list(EXPONENTIAL_KERNEL_GRID)}],
        candidates=None,
        seeds=list(range(10)),
    )

    comparison = compare_methods(run_experiment(cfg), 0.0)

    assert comparison.rm_count == 10
    assert comparison.worst_count == 10
    assert comparison.rm_mean <= comparison.worst_mean
    assert comparison.significant
