"""Ground-truth checks against a known tabular MDP.

These functions need the true dynamics and the data distribution mu, so they
are only available on synthetic benchmarks. They compute OPE errors, the
error identities that tie MetaFQE to the occupancy weights, the computable
upper bounds on |delta J|, and the annotations of a :class:`SelectionReport`.
"""

import logging
import math

import numpy as np

from fqe_selection.exceptions import InvalidArgumentError
from fqe_selection.kernels import Kernel, dual_norm_exact, rkhs_norm_surrogate
from fqe_selection.mdp import (
    FloatArray,
    HorizonSpec,
    OccupancyProfile,
    Policy,
    QFunction,
    TabularMdp,
    bellman_backup,
    discounted_occupancy,
    next_state_values,
    occupancy_profile,
    policy_value,
    state_action_marginals,
    true_policy_value,
)
from fqe_selection.operators import BellmanOperator, CandidateSet, bellman_error_l2, operator_error_sup
from fqe_selection.selection import FIXED_POINT_METHODS, QFunctionSeq, Runs, SelectionReport

logger = logging.getLogger(__name__)

DEFAULT_DELTA = 0.05
DEFAULT_PROBE_COUNT = 8
SUBOPTIMALITY_FACTOR = 3.0


def delta_j(mdp: TabularMdp, policy: Policy, horizon: HorizonSpec, q: QFunction) -> float:
    """OPE error J(q) - J(pi)."""
    return policy_value(mdp, policy, q) - true_policy_value(mdp, policy, horizon)


def _residual(x: BellmanOperator, f: QFunction, mdp: TabularMdp, policy: Policy) -> QFunction:
    return x.apply(f) - bellman_backup(mdp, policy, f, x.horizon.gamma)


def _finite_steps(horizon: HorizonSpec) -> int:
    if horizon.horizon is None:
        raise InvalidArgumentError('this oracle needs a finite horizon')
    return horizon.horizon


def precriterion_l2(
    x: BellmanOperator, seq: QFunctionSeq, horizon: HorizonSpec, mdp: TabularMdp, policy: Policy, mu: FloatArray
) -> float:
    """(1/C) sum_h gamma^(H-h) ||(X - B_pi) Q^X_{h-1}||_2 under mu."""
    steps = _finite_steps(horizon)
    total = sum(
        horizon.gamma ** (steps - h) * bellman_error_l2(x, seq.iterates[h - 1], mdp, policy, mu)
        for h in range(1, steps + 1)
    )
    return total / horizon.time_constant


def master_bound_l2(
    x: BellmanOperator,
    seq: QFunctionSeq,
    horizon: HorizonSpec,
    mdp: TabularMdp,
    policy: Policy,
    mu: FloatArray,
    profile: OccupancyProfile | None = None,
) -> float:
    """Upper bound C * max_h ||w_h||_2 * precriterion on |delta J(Q^X)|.

    Raises:
        AssumptionViolationError: If the policy leaves the support of mu

    """
    profile = profile if profile is not None else occupancy_profile(mdp, policy, horizon, mu)
    return horizon.time_constant * profile.max_weight_l2_norm * precriterion_l2(x, seq, horizon, mdp, policy, mu)


def kernel_precriterion(
    x: BellmanOperator,
    k: Kernel,
    seq: QFunctionSeq,
    horizon: HorizonSpec,
    mdp: TabularMdp,
    policy: Policy,
    mu: FloatArray,
) -> float:
    """(1/C) sum_h gamma^(H-h) * dual RKHS norm of (X - B_pi) Q^X_{h-1} under mu."""
    steps = _finite_steps(horizon)
    total = sum(
        horizon.gamma ** (steps - h) * dual_norm_exact(k, _residual(x, seq.iterates[h - 1], mdp, policy), mu)
        for h in range(1, steps + 1)
    )
    return total / horizon.time_constant


def master_bound_kernel(
    x: BellmanOperator,
    k: Kernel,
    seq: QFunctionSeq,
    horizon: HorizonSpec,
    mdp: TabularMdp,
    policy: Policy,
    mu: FloatArray,
    profile: OccupancyProfile | None = None,
) -> float:
    """Kernel analog of :func:`master_bound_l2`, with RKHS-norm surrogates of the w_h.

    Infinite when some w_h is outside the range of the Gram matrix.
    """
    profile = profile if profile is not None else occupancy_profile(mdp, policy, horizon, mu)
    weight_norm = max(rkhs_norm_surrogate(k, w) for w in profile.weights_per_step)
    if math.isinf(weight_norm):
        return math.inf
    return horizon.time_constant * weight_norm * kernel_precriterion(x, k, seq, horizon, mdp, policy, mu)


def telescoped_error(
    x: BellmanOperator, seq: QFunctionSeq, horizon: HorizonSpec, mdp: TabularMdp, policy: Policy
) -> float:
    """sum_h gamma^(h-1) E_{P_h}[(X - B_pi) Q^X_{H-h}], which equals delta J(Q^X)."""
    steps = _finite_steps(horizon)
    marginals = state_action_marginals(mdp, policy, steps)
    return float(
        sum(
            horizon.gamma ** (h - 1) * np.sum(marginals[h - 1] * _residual(x, seq.iterates[steps - h], mdp, policy))
            for h in range(1, steps + 1)
        )
    )


def fixed_point_error(q: QFunction, mdp: TabularMdp, policy: Policy, gamma: float) -> float:
    """C * E_nu[q - B_pi q] for the discounted occupancy nu, which equals J(q) - J(pi)."""
    nu = discounted_occupancy(mdp, policy, gamma)
    return float(np.sum(nu * (q - bellman_backup(mdp, policy, q, gamma)))) / (1.0 - gamma)


def fixed_point_bound_l2(q: QFunction, mdp: TabularMdp, policy: Policy, gamma: float, mu: FloatArray) -> float:
    """C * ||w||_2 * ||q - B_pi q||_2, an upper bound on |J(q) - J(pi)|."""
    profile = occupancy_profile(mdp, policy, HorizonSpec(None, gamma), mu)
    residual = q - bellman_backup(mdp, policy, q, gamma)
    weights = np.asarray(mu, dtype=np.float64).reshape(mdp.shape)
    residual_norm = float(np.sqrt(np.sum(weights * residual**2)))
    return profile.weight_avg_l2_norm * residual_norm / (1.0 - gamma)


def fixed_point_bound_kernel(
    q: QFunction, k: Kernel, mdp: TabularMdp, policy: Policy, gamma: float, mu: FloatArray
) -> float:
    """Kernel analog of :func:`fixed_point_bound_l2`."""
    profile = occupancy_profile(mdp, policy, HorizonSpec(None, gamma), mu)
    weight_norm = rkhs_norm_surrogate(k, profile.weight_avg)
    if math.isinf(weight_norm):
        return math.inf
    residual = q - bellman_backup(mdp, policy, q, gamma)
    return weight_norm * dual_norm_exact(k, residual, mu) / (1.0 - gamma)


def expected_squared_loss(x: BellmanOperator, f: QFunction, mdp: TabularMdp, policy: Policy, mu: FloatArray) -> float:
    """Population squared Bellman loss E[(r + gamma E f(s', a') - (X f)(s, a))^2].

    The expectation enumerates (s, a) ~ mu, both outcomes of the two-point
    reward law and every next state.
    """
    prediction = x.apply(f)
    continuation = x.horizon.gamma * next_state_values(policy, f)
    low, high, p_high = mdp.reward_support()
    total = np.zeros(mdp.shape)
    for reward, probability in ((low, 1.0 - p_high), (high, p_high)):
        errors = reward[:, :, None] + continuation[None, None, :] - prediction[:, :, None]
        total += probability * np.einsum('sat,sat->sa', mdp.transition, errors**2)
    weights = np.asarray(mu, dtype=np.float64).reshape(mdp.shape)
    return float(np.sum(weights * total))


def regret_deviation(c: float, n_candidates: int, steps: int, n: int, delta: float = DEFAULT_DELTA) -> float:
    """C * (2 ln(2 K H / delta) / n)^(1/4), the high-probability slack of the regret estimates."""
    return c * (2.0 * math.log(2.0 * n_candidates * steps / delta) / n) ** 0.25


def kernel_deviation(c: float, n: int, delta: float = DEFAULT_DELTA) -> float:
    """C * (4 max(1, ln(2 / delta)) / n)^(1/4), the slack of the kernel V-statistic."""
    return c * (4.0 * max(1.0, math.log(2.0 / delta)) / n) ** 0.25


def annotate_report(
    report: SelectionReport,
    cset: CandidateSet,
    runs: Runs,
    mdp: TabularMdp,
    policy: Policy,
    mu: FloatArray,
    n_valid: int,
    kernel: Kernel | None = None,
    delta: float = DEFAULT_DELTA,
    probe_count: int = DEFAULT_PROBE_COUNT,
) -> SelectionReport:
    """Fill the oracle fields of a report.

    Args:
        report: Report produced by a selection method
        cset: The candidate set the report was computed on
        runs: Sequences the report was computed from, keyed by candidate id
        mdp: Ground-truth MDP
        policy: Evaluation policy
        mu: Data distribution
        n_valid: Number of validation records
        kernel: Kernel for KLM and KLM-FP reports
        delta: Confidence parameter of the deviation term
        probe_count: Probes used for the suboptimality proxy

    Returns:
        A copy of the report with delta_j, excess_mae, bounds and the proxy set

    Raises:
        AssumptionViolationError: If the policy leaves the support of mu

    """
    horizon = cset[0].horizon
    c = horizon.time_constant
    fixed_point = report.method in FIXED_POINT_METHODS
    if report.kernel is not None and kernel is None:
        msg = f'{report.method} report needs its kernel for annotation'
        raise InvalidArgumentError(msg)

    truth = true_policy_value(mdp, policy, horizon)
    errors = [policy_value(mdp, policy, runs[x.id].terminal) - truth for x in cset]
    abs_errors = [abs(error) for error in errors]
    winner = cset[report.selected_index]
    seq = runs[winner.id]

    profile = occupancy_profile(mdp, policy, horizon, mu)
    if report.method == 'RM':
        bound = master_bound_l2(winner, seq, horizon, mdp, policy, mu, profile)
    elif report.method == 'KLM' and kernel is not None:
        bound = master_bound_kernel(winner, kernel, seq, horizon, mdp, policy, mu, profile)
    elif report.method == 'RM-FP':
        bound = fixed_point_bound_l2(seq.terminal, mdp, policy, horizon.gamma, mu)
    elif kernel is not None:
        bound = fixed_point_bound_kernel(seq.terminal, kernel, mdp, policy, horizon.gamma, mu)
    else:
        msg = f'cannot bound a {report.method} report'
        raise InvalidArgumentError(msg)

    weight_norm = profile.weight_avg_l2_norm if fixed_point else profile.max_weight_l2_norm
    criteria = [
        SUBOPTIMALITY_FACTOR * c * weight_norm * operator_error_sup(x, mdp, policy, mu, probe_count) for x in cset
    ]
    selected_error = abs_errors[report.selected_index]

    if report.kernel is not None:
        deviation = kernel_deviation(c, n_valid, delta)
    else:
        steps = len(seq.iterates) - 1
        deviation = regret_deviation(c, len(cset), max(1, steps), n_valid, delta)

    logger.debug('%s: |delta J| = %r, bound = %r', report.method, selected_error, bound)
    return report.model_copy(
        update={
            'delta_j': errors[report.selected_index],
            'abs_delta_j_all': abs_errors,
            'excess_mae': max(0.0, selected_error - min(abs_errors)),
            'bound_value': bound,
            'suboptimality_proxy': max(0.0, selected_error - min(criteria)),
            'deviation_term': deviation,
        }
    )
