"""Experiment configuration and the sweep runner.

A sweep crosses seeds, dataset sizes, horizons and evaluation-policy mixtures.
At every grid point it samples a dataset from the behavior distribution,
splits it, fits the candidate operators on the training part and runs each
configured selection method on the validation part. Rows that fail are kept
with ``status='failed'`` so the result table always covers the whole grid.
"""

import json
import logging
import math
import time
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Annotated, Literal

import numpy as np
import sentry_sdk
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from fqe_selection.datasets import (
    FeatureMap,
    TransitionDataset,
    feature_map_by_name,
    fit_feature_normalization,
    sample_dataset,
    split_dataset,
)
from fqe_selection.environments import garnet, inventory_chain
from fqe_selection.exceptions import (
    AssumptionViolationError,
    ConfigurationError,
    FqeSelectionError,
    InvalidArgumentError,
)
from fqe_selection.kernels import parse_kernel_spec
from fqe_selection.mdp import (
    FloatArray,
    HorizonSpec,
    MdpDocument,
    Policy,
    TabularMdp,
    greedy_expert,
    load_mdp,
    mdp_from_document,
    mix_policies,
    uniform_policy,
)
from fqe_selection.operators import (
    CandidateSet,
    CandidateSpec,
    build_candidate_set,
    default_candidate_specs,
    load_candidate_manifest,
)
from fqe_selection.oracles import DEFAULT_DELTA, DEFAULT_PROBE_COUNT, annotate_report
from fqe_selection.rng import derive_seed
from fqe_selection.selection import (
    DEFAULT_FP_TOLERANCE,
    FIXED_POINT_METHODS,
    KERNEL_METHODS,
    FixedPointConfig,
    MethodName,
    QFunctionSeq,
    SelectionReport,
    run_candidates,
    run_method,
)

logger = logging.getLogger(__name__)

RATE_FLOOR = 1e-6


class GarnetEnvironment(BaseModel):
    """Random sparse tabular MDP."""

    model_config = ConfigDict(extra='forbid')

    kind: Literal['garnet']
    n_states: int = Field(default=6, gt=0, description='Number of states')
    n_actions: int = Field(default=2, gt=0, description='Number of actions')
    branching: int = Field(default=3, gt=0, description='Successor states per (s, a)')
    seed: int = Field(default=0, description='Generator seed')
    reward_low: float = Field(default=0.0, ge=0.0, le=1.0, description='Lowest reward mean')
    reward_high: float = Field(default=1.0, ge=0.0, le=1.0, description='Highest reward mean')
    reward_noise: float = Field(default=0.1, ge=0.0, description='Two-point reward spread')

    def build(self) -> TabularMdp:
        """Generate the MDP."""
        return garnet(
            self.n_states,
            self.n_actions,
            self.branching,
            self.seed,
            reward_low=self.reward_low,
            reward_high=self.reward_high,
            reward_noise=self.reward_noise,
        )


class ChainEnvironment(BaseModel):
    """Inventory chain: stock levels as states, order sizes as actions."""

    model_config = ConfigDict(extra='forbid')

    kind: Literal['chain']
    capacity: int = Field(default=5, gt=0, description='Largest stock level')
    n_orders: int = Field(default=3, gt=0, description='Number of order sizes')
    demand_probs: list[float] = Field(default=[0.3, 0.4, 0.3], min_length=1, description='Demand law over 0..k')
    price: float = Field(default=2.0, description='Revenue per unit sold')
    order_cost: float = Field(default=1.0, description='Cost per unit ordered')
    holding_cost: float = Field(default=0.1, description='Cost per unit held')
    reward_noise: float = Field(default=0.05, ge=0.0, description='Two-point reward spread')

    def build(self) -> TabularMdp:
        """Generate the MDP."""
        return inventory_chain(
            capacity=self.capacity,
            n_orders=self.n_orders,
            demand_probs=tuple(self.demand_probs),
            price=self.price,
            order_cost=self.order_cost,
            holding_cost=self.holding_cost,
            reward_noise=self.reward_noise,
        )


class FileEnvironment(BaseModel):
    """MDP document on disk."""

    model_config = ConfigDict(extra='forbid')

    kind: Literal['file']
    path: Path = Field(description='Path of an MDP document')

    def build(self) -> TabularMdp:
        """Read the MDP."""
        try:
            return load_mdp(self.path)
        except OSError as exc:
            msg = f'cannot read MDP document {self.path}: {exc}'
            raise ConfigurationError(msg) from exc


class InlineEnvironment(BaseModel):
    """MDP document embedded in the configuration."""

    model_config = ConfigDict(extra='forbid')

    kind: Literal['inline']
    mdp: MdpDocument = Field(description='The MDP document')

    def build(self) -> TabularMdp:
        """Rebuild the MDP."""
        return mdp_from_document(self.mdp)


EnvironmentSpec = Annotated[
    GarnetEnvironment | ChainEnvironment | FileEnvironment | InlineEnvironment, Field(discriminator='kind')
]


class HorizonConfig(BaseModel):
    """One horizon of the grid; ``horizon`` null means infinite."""

    model_config = ConfigDict(extra='forbid')

    horizon: int | None = Field(default=None, gt=0, description='Episode length, null for infinite')
    gamma: float = Field(ge=0.0, le=1.0, description='Discount factor')

    @model_validator(mode='after')
    def _check_spec(self) -> 'HorizonConfig':
        self.spec()
        return self

    def spec(self) -> HorizonSpec:
        """The horizon as a :class:`HorizonSpec`."""
        return HorizonSpec(self.horizon, self.gamma)


class MethodSpec(BaseModel):
    """A selection method and, for the kernel methods, its kernels."""

    model_config = ConfigDict(extra='forbid')

    method: MethodName = Field(description='RM, KLM, RM-FP or KLM-FP')
    kernels: list[str] = Field(default_factory=list, description="Kernel specs such as 'exp:p=1:sigma=0.1'")
    h_star: int | None = Field(default=None, gt=0, description='Fixed-point budget, default ceil(n^(1/4))')
    fp_tolerance: float = Field(default=DEFAULT_FP_TOLERANCE, ge=0.0, description='Fixed-point sup-norm tolerance')

    @model_validator(mode='after')
    def _check_kernels(self) -> 'MethodSpec':
        if self.method in KERNEL_METHODS and not self.kernels:
            msg = f'{self.method} needs at least one kernel'
            raise ValueError(msg)
        if self.method not in KERNEL_METHODS and self.kernels:
            msg = f'{self.method} takes no kernels'
            raise ValueError(msg)
        for text in self.kernels:
            try:
                parse_kernel_spec(text)
            except ConfigurationError as exc:
                raise ValueError(str(exc)) from exc
        return self

    def fixed_point_config(self, n: int) -> FixedPointConfig:
        """Budget and tolerance for a dataset of size n."""
        if self.h_star is not None:
            return FixedPointConfig(self.h_star, self.fp_tolerance)
        return FixedPointConfig.for_sample_size(n, self.fp_tolerance)


class ExperimentConfig(BaseModel):
    """Full description of a sweep."""

    model_config = ConfigDict(extra='forbid')

    environment: EnvironmentSpec = Field(description='Ground-truth MDP')
    behavior: Literal['uniform'] | list[float] = Field(
        default='uniform', description="'uniform' or an explicit mu in flat (s, a) order"
    )
    eval_eps_grid: list[Annotated[float, Field(ge=0.0, le=1.0)]] = Field(
        min_length=1, description='Weights of the uniform policy in the evaluation mixture'
    )
    n_grid: list[Annotated[int, Field(ge=4)]] = Field(min_length=1, description='Dataset sizes')
    horizons: list[HorizonConfig] = Field(min_length=1, description='Horizon grid')
    methods: list[MethodSpec] = Field(min_length=1, description='Selection methods')
    candidates: list[CandidateSpec] | None = Field(default=None, description='Inline candidate specs')
    candidate_manifest: Path | None = Field(default=None, description='Candidate manifest file')
    seeds: list[int] = Field(min_length=1, description='Master seeds')
    delta: float = Field(default=DEFAULT_DELTA, gt=0.0, lt=1.0, description='Confidence of deviation terms')
    train_fraction: float = Field(default=0.5, gt=0.0, lt=1.0, description='Share of records used for fitting')
    kernel_features: Literal['one_hot', 'index', 'projection'] = Field(
        default='index', description='Feature map the kernels compare (s, a) pairs with'
    )
    probe_count: int = Field(default=DEFAULT_PROBE_COUNT, gt=0, description='Probes of the suboptimality proxy')
    record_timing: bool = Field(default=False, description='Record wall time per row (breaks byte-identical reruns)')
    workers: int | None = Field(default=None, gt=0, description='Grid-point worker threads')

    @field_validator('behavior')
    @classmethod
    def _check_behavior(cls, value: Literal['uniform'] | list[float]) -> Literal['uniform'] | list[float]:
        if isinstance(value, list) and (any(weight < 0.0 for weight in value) or abs(sum(value) - 1.0) > 1e-12):
            msg = 'explicit behavior must be a probability vector'
            raise ValueError(msg)
        return value

    @model_validator(mode='after')
    def _check_candidates(self) -> 'ExperimentConfig':
        if self.candidates is not None and self.candidate_manifest is not None:
            msg = 'give either candidates or candidate_manifest, not both'
            raise ValueError(msg)
        return self

    def candidate_specs(self) -> list[CandidateSpec]:
        """Inline specs, the manifest's specs, or the default grid."""
        if self.candidates is not None:
            return self.candidates
        if self.candidate_manifest is not None:
            return load_candidate_manifest(self.candidate_manifest)
        return default_candidate_specs()


def parse_experiment_config(text: str) -> ExperimentConfig:
    """Validate configuration JSON."""
    try:
        return ExperimentConfig.model_validate(json.loads(text))
    except (json.JSONDecodeError, ValidationError) as exc:
        msg = f'Invalid experiment configuration: {exc}'
        raise ConfigurationError(msg) from exc


def load_experiment_config(path: Path) -> ExperimentConfig:
    """Read and validate a configuration file."""
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as exc:
        msg = f'cannot read configuration {path}: {exc}'
        raise ConfigurationError(msg) from exc
    return parse_experiment_config(text)


def build_environment(cfg: ExperimentConfig) -> TabularMdp:
    """Build the configured MDP.

    Raises:
        ConfigurationError: If the environment parameters are invalid

    """
    try:
        return cfg.environment.build()
    except InvalidArgumentError as exc:
        msg = f'invalid environment: {exc}'
        raise ConfigurationError(msg) from exc


def behavior_distribution(cfg: ExperimentConfig, mdp: TabularMdp) -> FloatArray:
    """The data distribution mu over (s, a), flat."""
    size = mdp.n_states * mdp.n_actions
    if cfg.behavior == 'uniform':
        return np.full(size, 1.0 / size)
    if len(cfg.behavior) != size:
        msg = f'explicit behavior has {len(cfg.behavior)} entries, the MDP has {size} pairs'
        raise ConfigurationError(msg)
    return np.asarray(cfg.behavior, dtype=np.float64)


def evaluation_policy(mdp: TabularMdp, horizon: HorizonSpec, eps_eval: float) -> Policy:
    """The (eps : 1 - eps) mixture of the uniform policy and the greedy expert."""
    return mix_policies(uniform_policy(*mdp.shape), greedy_expert(mdp, horizon), eps_eval)


class RunResult(BaseModel):
    """One row of the results table."""

    seed: int = Field(description='Master seed')
    method: str = Field(description='Selection method')
    kernel: str = Field(default='', description='Kernel spec, empty for RM and RM-FP')
    n: int = Field(description='Dataset size')
    H: str = Field(description="Horizon length, or 'inf'")
    gamma: float = Field(description='Discount factor')
    eps_eval: float = Field(description='Weight of the uniform policy in the evaluation mixture')
    selected_id: str = Field(default='', description='Selected candidate, empty when failed')
    delta_j: float | None = Field(default=None, description='OPE error of the selected candidate')
    excess_mae: float | None = Field(default=None, description='|delta_j| minus the best |delta J| in the set')
    bound_value: float | None = Field(default=None, description='Upper bound on |delta_j|')
    wall_ms: float = Field(default=0.0, description='Wall time, 0 unless timing is recorded')
    status: Literal['ok', 'failed'] = Field(description='Row outcome')
    reason: str = Field(default='', description='Failure message')
    scores: dict[str, float] = Field(default_factory=dict, description='Score per candidate id')


@dataclass(frozen=True)
class GridPoint:
    """Coordinates of one dataset draw."""

    seed: int
    n: int
    horizon: HorizonConfig
    eps_eval: float

    @property
    def derived_seed(self) -> int:
        """Seed of this point's random streams."""
        return derive_seed(self.seed, self.n, self.horizon.spec().label, self.horizon.gamma, self.eps_eval)


def grid_points(cfg: ExperimentConfig) -> list[GridPoint]:
    """Grid points in emission order."""
    return [
        GridPoint(seed, n, horizon, eps)
        for seed in cfg.seeds
        for n in cfg.n_grid
        for horizon in cfg.horizons
        for eps in cfg.eval_eps_grid
    ]


def method_rows(cfg: ExperimentConfig) -> list[tuple[MethodSpec, str]]:
    """(method, kernel) pairs producing one row each per grid point."""
    return [(spec, kernel) for spec in cfg.methods for kernel in (spec.kernels or [''])]


@dataclass
class PointContext:
    """Shared state of one grid point; candidate runs are computed on first use."""

    cfg: ExperimentConfig
    mdp: TabularMdp
    mu: FloatArray
    specs: list[CandidateSpec]
    point: GridPoint
    policy: Policy
    train: TransitionDataset
    valid: TransitionDataset
    kernel_features: FeatureMap
    _finite: tuple[CandidateSet, dict[str, QFunctionSeq]] | None = None
    _fixed_point_set: CandidateSet | None = None
    _fixed_point_runs: dict[FixedPointConfig, dict[str, QFunctionSeq]] = field(default_factory=dict)

    def finite_runs(self) -> tuple[CandidateSet, dict[str, QFunctionSeq]]:
        """Candidates fitted for the grid horizon and their MetaFQE runs."""
        if self._finite is None:
            horizon = self.point.horizon.spec()
            cset = self._build(horizon)
            self._finite = cset, run_candidates(cset, horizon=horizon)
        return self._finite

    def fixed_point_runs(self, fp_cfg: FixedPointConfig) -> tuple[CandidateSet, dict[str, QFunctionSeq]]:
        """Candidates fitted for the discounted infinite horizon and their MetaFQE-FP runs."""
        if self._fixed_point_set is None:
            self._fixed_point_set = self._build(HorizonSpec(None, self.point.horizon.gamma))
        if fp_cfg not in self._fixed_point_runs:
            self._fixed_point_runs[fp_cfg] = run_candidates(self._fixed_point_set, cfg=fp_cfg)
        return self._fixed_point_set, self._fixed_point_runs[fp_cfg]

    def _build(self, horizon: HorizonSpec) -> CandidateSet:
        return build_candidate_set(
            self.specs, self.train, self.policy, horizon, mdp=self.mdp, seed=self.point.derived_seed
        )


def prepare_point(
    cfg: ExperimentConfig, mdp: TabularMdp, mu: FloatArray, specs: list[CandidateSpec], point: GridPoint
) -> PointContext:
    """Sample, split and set up the evaluation policy and kernel features of a grid point."""
    seed = point.derived_seed
    horizon = point.horizon.spec()
    mu_spec = 'uniform' if cfg.behavior == 'uniform' else 'explicit'
    dataset = sample_dataset(mdp, mu, point.n, seed, mu_spec=mu_spec)
    train, valid = split_dataset(dataset, cfg.train_fraction, seed)
    features = feature_map_by_name(cfg.kernel_features, mdp.n_states, mdp.n_actions, seed=seed)
    return PointContext(
        cfg=cfg,
        mdp=mdp,
        mu=mu,
        specs=specs,
        point=point,
        policy=evaluation_policy(mdp, horizon, point.eps_eval),
        train=train,
        valid=valid,
        kernel_features=fit_feature_normalization(features, train),
    )


def select_at_point(context: PointContext, method_spec: MethodSpec, kernel_text: str) -> SelectionReport:
    """Run and annotate one selection method at a prepared grid point."""
    method = method_spec.method
    kernel = parse_kernel_spec(kernel_text).bind(context.kernel_features) if kernel_text else None
    if method in FIXED_POINT_METHODS:
        fp_cfg = method_spec.fixed_point_config(context.point.n)
        cset, runs = context.fixed_point_runs(fp_cfg)
        report = run_method(method, cset, context.valid, context.policy, cfg=fp_cfg, k=kernel, runs=runs)
    else:
        cset, runs = context.finite_runs()
        horizon = context.point.horizon.spec()
        report = run_method(method, cset, context.valid, context.policy, horizon=horizon, k=kernel, runs=runs)
    return annotate_report(
        report,
        cset,
        runs,
        context.mdp,
        context.policy,
        context.mu,
        len(context.valid),
        kernel=kernel,
        delta=context.cfg.delta,
        probe_count=context.cfg.probe_count,
    )


def _row(point: GridPoint, method: str, kernel: str) -> dict[str, object]:
    return {
        'seed': point.seed,
        'method': method,
        'kernel': kernel,
        'n': point.n,
        'H': point.horizon.spec().label,
        'gamma': point.horizon.gamma,
        'eps_eval': point.eps_eval,
    }


def _failed_row(point: GridPoint, method: str, kernel: str, error: FqeSelectionError) -> RunResult:
    logger.warning('Row failed (seed=%d n=%d H=%s eps=%r %s %s): %s', point.seed, point.n,
                   point.horizon.spec().label, point.eps_eval, method, kernel, error)
    sentry_sdk.set_context('grid_point', {**_row(point, method, kernel), 'error_type': type(error).__name__})
    sentry_sdk.capture_exception(error)
    return RunResult.model_validate({
        **_row(point, method, kernel),
        'status': 'failed',
        'reason': f'{type(error).__name__}: {error}',
    })


def run_grid_point(
    cfg: ExperimentConfig, mdp: TabularMdp, mu: FloatArray, specs: list[CandidateSpec], point: GridPoint
) -> list[RunResult]:
    """All rows of one grid point; failures are isolated per row."""
    rows = method_rows(cfg)
    try:
        context = prepare_point(cfg, mdp, mu, specs, point)
    except FqeSelectionError as exc:
        return [_failed_row(point, spec.method, kernel, exc) for spec, kernel in rows]

    results = []
    for spec, kernel in rows:
        start = time.perf_counter()
        try:
            report = select_at_point(context, spec, kernel)
        except FqeSelectionError as exc:
            results.append(_failed_row(point, spec.method, kernel, exc))
        else:
            elapsed = (time.perf_counter() - start) * 1000.0 if cfg.record_timing else 0.0
            results.append(
                RunResult.model_validate({
                    **_row(point, spec.method, kernel),
                    'selected_id': report.selected_id,
                    'delta_j': report.delta_j,
                    'excess_mae': report.excess_mae,
                    'bound_value': report.bound_value,
                    'wall_ms': elapsed,
                    'status': 'ok',
                    'scores': dict(zip(report.candidate_ids, report.per_candidate_scores, strict=True)),
                })
            )
    return results


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> list[RunResult]:
    """Run the whole sweep.

    Args:
        cfg: Validated configuration
        workers: Grid-point threads; overrides ``cfg.workers``

    Returns:
        One row per grid point and (method, kernel), in grid order

    Raises:
        ConfigurationError: If the environment, behavior or candidates are invalid

    """
    mdp = build_environment(cfg)
    mu = behavior_distribution(cfg, mdp)
    specs = cfg.candidate_specs()
    points = grid_points(cfg)
    n_workers = workers or cfg.workers or 1
    logger.info(
        'Starting sweep: %d grid points x %d method rows on %d workers', len(points), len(method_rows(cfg)), n_workers
    )

    run_point: Callable[[GridPoint], list[RunResult]] = partial(run_grid_point, cfg, mdp, mu, specs)
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        batches = list(pool.map(run_point, points))

    results = [row for batch in batches for row in batch]
    failed = sum(row.status == 'failed' for row in results)
    logger.info('Sweep finished: %d rows, %d failed', len(results), failed)
    return results


def all_rows_violate_assumption(results: list[RunResult]) -> bool:
    """Whether every row failed because the policy left the support of mu."""
    prefix = f'{AssumptionViolationError.__name__}:'
    return bool(results) and all(row.status == 'failed' and row.reason.startswith(prefix) for row in results)


# Analysis -----------------------------------------------------------------


class RateCheck(BaseModel):
    """Log-log slope of the median excess MAE against n."""

    method: str = Field(description='Selection method')
    kernel: str = Field(default='', description='Kernel spec')
    n_values: list[int] = Field(description='Dataset sizes, increasing')
    medians: list[float] = Field(description='Median excess MAE per size')
    slope: float | None = Field(description='Least-squares slope, None when every median is zero')
    at_floor: bool = Field(description='Whether every median is zero')


def mean_and_sd(values: list[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    data = np.asarray(values, dtype=np.float64)
    sd = float(np.std(data, ddof=1)) if data.size > 1 else 0.0
    return float(np.mean(data)), sd


def _ok_rows(results: list[RunResult], method: str, kernel: str | None = None) -> list[RunResult]:
    return [
        row
        for row in results
        if row.status == 'ok'
        and row.method == method
        and row.excess_mae is not None
        and (kernel is None or row.kernel == kernel)
    ]


def rate_check(
    results: list[RunResult], method: str = 'RM', kernel: str = '', min_sizes: int = 3, min_seeds: int = 10
) -> RateCheck:
    """Fit log(median excess MAE + 1e-6) against log n.

    Raises:
        InvalidArgumentError: With fewer than ``min_sizes`` sizes or ``min_seeds`` rows per size

    """
    by_n: dict[int, list[float]] = {}
    for row in _ok_rows(results, method, kernel):
        by_n.setdefault(row.n, []).append(float(row.excess_mae or 0.0))
    if len(by_n) < min_sizes:
        msg = f'rate check needs {min_sizes} dataset sizes, got {sorted(by_n)}'
        raise InvalidArgumentError(msg)
    short = sorted(n for n, values in by_n.items() if len(values) < min_seeds)
    if short:
        msg = f'rate check needs {min_seeds} rows per size; too few at n={short}'
        raise InvalidArgumentError(msg)

    n_values = sorted(by_n)
    medians = [float(np.median(by_n[n])) for n in n_values]
    if all(median == 0.0 for median in medians):
        return RateCheck(method=method, kernel=kernel, n_values=n_values, medians=medians, slope=None, at_floor=True)
    slope = float(np.polyfit(np.log(n_values), np.log(np.asarray(medians) + RATE_FLOOR), 1)[0])
    logger.info('Rate check %s: slope %.3f over n=%s', method, slope, n_values)
    return RateCheck(method=method, kernel=kernel, n_values=n_values, medians=medians, slope=slope, at_floor=False)


class MethodComparison(BaseModel):
    """RM against the worst KLM kernel at one evaluation mixture."""

    eps_eval: float
    rm_mean: float
    rm_sd: float
    rm_count: int
    worst_kernel: str
    worst_mean: float
    worst_sd: float
    worst_count: int
    gap: float = Field(description='worst KLM mean minus RM mean')
    pooled_se: float = Field(description='sqrt(sd_rm^2 / n_rm + sd_klm^2 / n_klm)')

    @property
    def significant(self) -> bool:
        """Whether RM beats the worst kernel by more than one pooled standard error."""
        return self.gap > self.pooled_se


def compare_methods(results: list[RunResult], eps: float) -> MethodComparison:
    """Compare RM's mean excess MAE at ``eps`` with the worst KLM kernel's.

    Raises:
        InvalidArgumentError: If RM or KLM has no successful rows at ``eps``

    """
    at_eps = [row for row in results if math.isclose(row.eps_eval, eps)]
    rm = [float(row.excess_mae or 0.0) for row in _ok_rows(at_eps, 'RM')]
    kernels = sorted({row.kernel for row in _ok_rows(at_eps, 'KLM')})
    if not rm or not kernels:
        msg = f'need successful RM and KLM rows at eps_eval={eps}'
        raise InvalidArgumentError(msg)

    rm_mean, rm_sd = mean_and_sd(rm)
    per_kernel = {
        kernel: [float(row.excess_mae or 0.0) for row in _ok_rows(at_eps, 'KLM', kernel)] for kernel in kernels
    }
    worst_kernel = max(kernels, key=lambda kernel: (mean_and_sd(per_kernel[kernel])[0], kernel))
    worst = per_kernel[worst_kernel]
    worst_mean, worst_sd = mean_and_sd(worst)
    return MethodComparison(
        eps_eval=eps,
        rm_mean=rm_mean,
        rm_sd=rm_sd,
        rm_count=len(rm),
        worst_kernel=worst_kernel,
        worst_mean=worst_mean,
        worst_sd=worst_sd,
        worst_count=len(worst),
        gap=worst_mean - rm_mean,
        pooled_se=math.sqrt(rm_sd**2 / len(rm) + worst_sd**2 / len(worst)),
    )


@dataclass(frozen=True)
class MethodProperties:
    """Qualitative comparison of the selection methods."""

    method: MethodName
    off_policy_factor: str
    error_metric: str
    hyperparameters: str
    time_complexity: str


METHOD_PROPERTIES = (
    MethodProperties('RM', 'max_h ||w_h||_2', '||X - B_pi||_2', 'none', 'O(H K^2 n)'),
    MethodProperties('KLM', 'max_h ||w_h||_F(kappa)', '||X - B_pi||_F(kappa)*', 'kernel', 'O(H K n^2)'),
    MethodProperties('RM-FP', '||w||_2', '||X - B_pi||_2', 'none', 'O(K n^(5/4) + K^2 n)'),
    MethodProperties('KLM-FP', '||w||_F(kappa)', '||X - B_pi||_F(kappa)*', 'kernel', 'O(K n^2)'),
)
