"""MetaFQE drivers, Bellman losses and the four hyperparameter-selection methods.

RM and KLM score each candidate by a discounted sum of its losses along its
own iterates; RM-FP and KLM-FP score the averaged iterate by how far it is
from a Bellman fixed point. Every method returns a :class:`SelectionReport`
computed from validation data only; ground-truth annotations are added by
:func:`fqe_selection.oracles.annotate_report`.
"""

import logging
import math
from collections.abc import Callable, Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal, TypeVar

import numpy as np
from pydantic import BaseModel, Field

from fqe_selection.datasets import TransitionDataset
from fqe_selection.exceptions import InvalidArgumentError, InvalidHorizonError
from fqe_selection.kernels import Kernel, kernel_bellman_loss
from fqe_selection.mdp import HorizonSpec, Policy, QFunction
from fqe_selection.operators import TIE_TOLERANCE, BellmanOperator, CandidateSet, IdentityOperator, bellman_residuals

logger = logging.getLogger(__name__)

MethodName = Literal['RM', 'KLM', 'RM-FP', 'KLM-FP']
METHODS: tuple[MethodName, ...] = ('RM', 'KLM', 'RM-FP', 'KLM-FP')
KERNEL_METHODS = frozenset({'KLM', 'KLM-FP'})
FIXED_POINT_METHODS = frozenset({'RM-FP', 'KLM-FP'})

DEFAULT_FP_TOLERANCE = 1e-12


@dataclass(frozen=True, eq=False)
class QFunctionSeq:
    """Iterates of one candidate.

    ``iterates`` holds Q_0 = 0, Q_1, ... as produced. In fixed-point mode
    ``averages`` holds the running means Q̄_1, Q̄_2, ... and ``terminal`` is the
    last average, or the iterate at which the fixed point was detected.
    """

    iterates: tuple[QFunction, ...]
    terminal: QFunction
    averages: tuple[QFunction, ...] = field(default=())
    fp_exit_step: int | None = None

    @property
    def fixed_point_mode(self) -> bool:
        """Whether the sequence came from :func:`meta_fqe_fp`."""
        return bool(self.averages) or self.fp_exit_step is not None


Runs = Mapping[str, QFunctionSeq]


def fourth_root_ceil(n: int) -> int:
    """ceil(n ** (1/4)) in exact integer arithmetic (at least 1)."""
    root = math.isqrt(math.isqrt(max(n, 1)))
    while root**4 < n:
        root += 1
    return max(1, root)


@dataclass(frozen=True)
class FixedPointConfig:
    """Iteration budget H* and the sup-norm tolerance of the early-exit test."""

    h_star: int
    fp_tolerance: float = DEFAULT_FP_TOLERANCE

    def __post_init__(self) -> None:
        if self.h_star < 1:
            msg = f'h_star must be positive, got {self.h_star}'
            raise InvalidArgumentError(msg)
        if self.fp_tolerance < 0.0:
            msg = f'fp_tolerance must be non-negative, got {self.fp_tolerance}'
            raise InvalidArgumentError(msg)

    @classmethod
    def for_sample_size(cls, n: int, fp_tolerance: float = DEFAULT_FP_TOLERANCE) -> 'FixedPointConfig':
        """Default budget H* = ceil(n^(1/4))."""
        return cls(fourth_root_ceil(n), fp_tolerance)


def _require_finite(horizon: HorizonSpec) -> int:
    if horizon.horizon is None:
        raise InvalidHorizonError('this method needs a finite horizon')
    return horizon.horizon


def _require_discounted(horizon: HorizonSpec) -> None:
    if horizon.gamma >= 1.0:
        msg = f'fixed-point methods need gamma < 1, got {horizon.gamma}'
        raise InvalidHorizonError(msg)


def meta_fqe(x: BellmanOperator, horizon: HorizonSpec) -> QFunctionSeq:
    """Run Q_h = X Q_{h-1} from Q_0 = 0 for H steps.

    Args:
        x: Candidate operator
        horizon: Finite horizon

    Returns:
        Q_0..Q_H with terminal Q_H

    Raises:
        InvalidHorizonError: If the horizon is infinite

    """
    steps = _require_finite(horizon)
    iterates = [np.zeros(x.shape)]
    for _ in range(steps):
        iterates.append(x.apply(iterates[-1]))
    return QFunctionSeq(iterates=tuple(iterates), terminal=iterates[-1])


def meta_fqe_fp(x: BellmanOperator, cfg: FixedPointConfig) -> QFunctionSeq:
    """Run H* steps of X while averaging the iterates.

    If some step changes the iterate by at most ``fp_tolerance`` in sup-norm,
    that iterate is returned as the fixed point.

    Raises:
        InvalidHorizonError: If the operator's discount is 1

    """
    _require_discounted(x.horizon)
    iterates = [np.zeros(x.shape)]
    averages: list[QFunction] = []
    average = iterates[0]
    for step in range(1, cfg.h_star + 1):
        current = x.apply(iterates[-1])
        iterates.append(current)
        if float(np.max(np.abs(current - iterates[-2]))) <= cfg.fp_tolerance:
            logger.debug('Candidate %s reached a fixed point at step %d', x.id, step)
            return QFunctionSeq(iterates=tuple(iterates), terminal=current, averages=tuple(averages), fp_exit_step=step)
        average = (1.0 - 1.0 / step) * average + current / step
        averages.append(average)
    return QFunctionSeq(iterates=tuple(iterates), terminal=average, averages=tuple(averages))


def squared_bellman_loss(x: BellmanOperator, f: QFunction, d: TransitionDataset, policy: Policy) -> float:
    """(1/n) sum (r + gamma E f(s', a') - (X f)(s, a))^2 over d."""
    return float(np.mean(bellman_residuals(x, f, d, policy) ** 2))


def bellman_regret(x: BellmanOperator, cset: CandidateSet, f: QFunction, d: TransitionDataset, policy: Policy) -> float:
    """L(x; f) - min over the candidate set of L(A; f).

    Raises:
        InvalidArgumentError: If x is not in cset

    """
    index = cset.index_of(x)
    losses = [squared_bellman_loss(candidate, f, d, policy) for candidate in cset]
    return losses[index] - min(losses)


def _discounted_root_sum(values: list[float], horizon: HorizonSpec) -> float:
    steps = len(values)
    total = sum(horizon.gamma ** (steps - h) * math.sqrt(max(0.0, value)) for h, value in enumerate(values, start=1))
    return total / horizon.time_constant


def total_regret(
    x: BellmanOperator,
    cset: CandidateSet,
    seq: QFunctionSeq,
    horizon: HorizonSpec,
    d: TransitionDataset,
    policy: Policy,
) -> float:
    """(1/C) sum_h gamma^(H-h) sqrt(Regret(x; Q^X_{h-1})) along x's own iterates."""
    steps = _require_finite(horizon)
    regrets = [bellman_regret(x, cset, seq.iterates[h - 1], d, policy) for h in range(1, steps + 1)]
    return _discounted_root_sum(regrets, horizon)


def total_kernel_loss(
    x: BellmanOperator,
    k: Kernel,
    seq: QFunctionSeq,
    horizon: HorizonSpec,
    d: TransitionDataset,
    policy: Policy,
) -> float:
    """(1/C) sum_h gamma^(H-h) sqrt(max(0, KBL(x; Q^X_{h-1})))."""
    steps = _require_finite(horizon)
    losses = [kernel_bellman_loss(k, x, seq.iterates[h - 1], d, policy) for h in range(1, steps + 1)]
    return _discounted_root_sum(losses, horizon)


class SelectionReport(BaseModel):
    """Outcome of one selection method on one candidate set.

    Oracle fields stay ``None`` until :func:`fqe_selection.oracles.annotate_report`
    fills them against the ground-truth MDP.
    """

    method: MethodName = Field(description='Selection method')
    kernel: str | None = Field(default=None, description='Kernel spec for KLM and KLM-FP')
    candidate_ids: list[str] = Field(description='Candidate ids in selection order')
    per_candidate_scores: list[float] = Field(description='Score per candidate, lower is better')
    selected_id: str = Field(description='Id of the lowest-scoring candidate (lowest index on ties)')
    selected_index: int = Field(description='Position of the selected candidate')
    selected_q: list[list[float]] = Field(description="Winner's terminal Q-function")
    delta_j: float | None = Field(default=None, description='J(selected Q) - J(pi)')
    abs_delta_j_all: list[float] | None = Field(default=None, description='|J(Q^X) - J(pi)| per candidate')
    excess_mae: float | None = Field(default=None, description='|delta_j| - min over candidates of |delta J|')
    bound_value: float | None = Field(default=None, description='Upper bound on |delta_j| for the winner')
    suboptimality_proxy: float | None = Field(
        default=None, description='max(0, |delta_j| - min_X 3 C max_h ||w_h|| lower-bound(||X - B_pi||)), a proxy'
    )
    deviation_term: float | None = Field(default=None, description='Finite-sample deviation term at confidence delta')


def tied_argmin(scores: list[float]) -> int:
    """Index of the smallest score; scores within TIE_TOLERANCE of it resolve to the lowest index."""
    best = min(scores)
    return next(index for index, score in enumerate(scores) if score <= best + TIE_TOLERANCE)


def _make_report(
    method: MethodName, cset: CandidateSet, scores: list[float], runs: Runs, kernel: Kernel | None = None
) -> SelectionReport:
    index = tied_argmin(scores)
    winner = cset[index]
    for candidate, score in zip(cset, scores, strict=True):
        logger.debug('%s score of %s: %r', method, candidate.id, score)
    logger.info('%s selected %s', method if kernel is None else f'{method}({kernel.spec.text})', winner.id)
    return SelectionReport(
        method=method,
        kernel=None if kernel is None else kernel.spec.text,
        candidate_ids=cset.ids,
        per_candidate_scores=scores,
        selected_id=winner.id,
        selected_index=index,
        selected_q=np.asarray(runs[winner.id].terminal).tolist(),
    )


T = TypeVar('T')


def _map_candidates(cset: CandidateSet, work: Callable[[BellmanOperator], T], workers: int) -> list[T]:
    if workers <= 1:
        return [work(candidate) for candidate in cset]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(work, cset))


def run_candidates(
    cset: CandidateSet,
    horizon: HorizonSpec | None = None,
    cfg: FixedPointConfig | None = None,
    workers: int = 1,
) -> dict[str, QFunctionSeq]:
    """Run MetaFQE (``horizon`` given) or MetaFQE-FP (``cfg`` given) for every candidate.

    Returns:
        Mapping from candidate id to its sequence, in candidate order

    """
    if cfg is not None and horizon is None:
        fixed_point = cfg
        sequences = _map_candidates(cset, lambda x: meta_fqe_fp(x, fixed_point), workers)
    elif horizon is not None and cfg is None:
        finite = horizon
        sequences = _map_candidates(cset, lambda x: meta_fqe(x, finite), workers)
    else:
        raise InvalidArgumentError('pass exactly one of horizon and cfg')
    return dict(zip(cset.ids, sequences, strict=True))


def _finite_runs(cset: CandidateSet, horizon: HorizonSpec, runs: Runs | None, workers: int) -> Runs:
    _require_finite(horizon)
    return runs if runs is not None else run_candidates(cset, horizon=horizon, workers=workers)


def _fixed_point_runs(cset: CandidateSet, cfg: FixedPointConfig, runs: Runs | None, workers: int) -> Runs:
    for candidate in cset:
        _require_discounted(candidate.horizon)
    return runs if runs is not None else run_candidates(cset, cfg=cfg, workers=workers)


def select_rm(
    cset: CandidateSet,
    horizon: HorizonSpec,
    d_valid: TransitionDataset,
    policy: Policy,
    runs: Runs | None = None,
    workers: int = 1,
) -> SelectionReport:
    """Pick the candidate with the smallest total regret.

    Args:
        cset: Candidate operators fitted on the training split
        horizon: Finite horizon
        d_valid: Validation split
        policy: Evaluation policy
        runs: Precomputed MetaFQE sequences, keyed by candidate id
        workers: Threads used for the per-candidate work

    Returns:
        Report without oracle annotations

    """
    runs = _finite_runs(cset, horizon, runs, workers)
    steps = _require_finite(horizon)
    # losses L(A; Q^X_{h-1}) for every pair, each computed once
    probes = {(x.id, h): runs[x.id].iterates[h - 1] for x in cset for h in range(1, steps + 1)}

    def losses_for(a: BellmanOperator) -> dict[tuple[str, int], float]:
        return {key: squared_bellman_loss(a, f, d_valid, policy) for key, f in probes.items()}

    table = _map_candidates(cset, losses_for, workers)
    scores = []
    for index, x in enumerate(cset):
        regrets = []
        for h in range(1, steps + 1):
            column = [losses[x.id, h] for losses in table]
            regrets.append(column[index] - min(column))
        scores.append(_discounted_root_sum(regrets, horizon))
    return _make_report('RM', cset, scores, runs)


def select_klm(
    cset: CandidateSet,
    k: Kernel,
    horizon: HorizonSpec,
    d_valid: TransitionDataset,
    policy: Policy,
    runs: Runs | None = None,
    workers: int = 1,
) -> SelectionReport:
    """Pick the candidate with the smallest total kernel loss."""
    runs = _finite_runs(cset, horizon, runs, workers)
    scores = _map_candidates(
        cset, lambda x: total_kernel_loss(x, k, runs[x.id], horizon, d_valid, policy), workers
    )
    return _make_report('KLM', cset, scores, runs, kernel=k)


def _identity_for(x: BellmanOperator) -> IdentityOperator:
    return IdentityOperator(x.horizon, x.shape)


def select_rm_fp(
    cset: CandidateSet,
    cfg: FixedPointConfig,
    d_valid: TransitionDataset,
    policy: Policy,
    runs: Runs | None = None,
    workers: int = 1,
) -> SelectionReport:
    """Pick the averaged iterate with the smallest fixed-point Bellman regret.

    The score of X is L(Id; Q̄^X) - min_A L(Id; Q̄^A), where Id is the identity
    operator, so the residual is r + gamma E f(s', a') - f(s, a).
    """
    runs = _fixed_point_runs(cset, cfg, runs, workers)
    losses = _map_candidates(
        cset, lambda x: squared_bellman_loss(_identity_for(x), runs[x.id].terminal, d_valid, policy), workers
    )
    best = min(losses)
    return _make_report('RM-FP', cset, [loss - best for loss in losses], runs)


def select_klm_fp(
    cset: CandidateSet,
    k: Kernel,
    cfg: FixedPointConfig,
    d_valid: TransitionDataset,
    policy: Policy,
    runs: Runs | None = None,
    workers: int = 1,
) -> SelectionReport:
    """Pick the averaged iterate with the smallest kernel Bellman loss KBL(Id; Q̄^X)."""
    runs = _fixed_point_runs(cset, cfg, runs, workers)
    scores = _map_candidates(
        cset,
        lambda x: max(0.0, kernel_bellman_loss(k, _identity_for(x), runs[x.id].terminal, d_valid, policy)),
        workers,
    )
    return _make_report('KLM-FP', cset, scores, runs, kernel=k)


def run_method(
    method: MethodName,
    cset: CandidateSet,
    d_valid: TransitionDataset,
    policy: Policy,
    horizon: HorizonSpec | None = None,
    cfg: FixedPointConfig | None = None,
    k: Kernel | None = None,
    runs: Runs | None = None,
    workers: int = 1,
) -> SelectionReport:
    """Dispatch to one of the four selection methods by name.

    Raises:
        InvalidArgumentError: If the inputs the method needs are missing

    """
    if method in FIXED_POINT_METHODS and cfg is None:
        msg = f'{method} needs a fixed-point configuration'
        raise InvalidArgumentError(msg)
    if method not in FIXED_POINT_METHODS and horizon is None:
        msg = f'{method} needs a horizon'
        raise InvalidArgumentError(msg)
    if method in KERNEL_METHODS and k is None:
        msg = f'{method} needs a kernel'
        raise InvalidArgumentError(msg)

    if method == 'RM' and horizon is not None:
        return select_rm(cset, horizon, d_valid, policy, runs, workers)
    if method == 'RM-FP' and cfg is not None:
        return select_rm_fp(cset, cfg, d_valid, policy, runs, workers)
    if method == 'KLM' and horizon is not None and k is not None:
        return select_klm(cset, k, horizon, d_valid, policy, runs, workers)
    if method == 'KLM-FP' and cfg is not None and k is not None:
        return select_klm_fp(cset, k, cfg, d_valid, policy, runs, workers)
    msg = f'unknown selection method {method!r}'
    raise InvalidArgumentError(msg)
