"""Finite MDPs, policies and exact dynamic-programming oracles.

Arrays follow one convention throughout the package: a Q-function or any
other per-(s, a) quantity has shape ``(n_states, n_actions)``, transition
kernels have shape ``(n_states, n_actions, n_states)``.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from fqe_selection.exceptions import (
    AssumptionViolationError,
    ConfigurationError,
    ConvergenceError,
    InvalidArgumentError,
    InvalidHorizonError,
)

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
QFunction = FloatArray

PROBABILITY_TOLERANCE = 1e-12
VALUE_ITERATION_TOLERANCE = 1e-12
OCCUPANCY_TAIL_TOLERANCE = 1e-10


def _frozen(array: npt.ArrayLike) -> FloatArray:
    values = np.array(array, dtype=np.float64)
    values.setflags(write=False)
    return values


def _check_simplex(values: FloatArray, what: str) -> None:
    if np.any(values < 0.0):
        msg = f'{what} has negative entries'
        raise InvalidArgumentError(msg)
    sums = values.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > PROBABILITY_TOLERANCE):
        msg = f'{what} does not sum to 1 (max deviation {np.max(np.abs(sums - 1.0)):.3e})'
        raise InvalidArgumentError(msg)


@dataclass(frozen=True)
class HorizonSpec:
    """Episode length and discount.

    ``horizon=None`` stands for an infinite horizon, which needs ``gamma < 1``.
    """

    horizon: int | None
    gamma: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            msg = f'gamma must lie in [0, 1], got {self.gamma}'
            raise InvalidHorizonError(msg)
        if self.horizon is None:
            if self.gamma >= 1.0:
                raise InvalidHorizonError('an infinite horizon requires gamma < 1')
        elif self.horizon < 1:
            msg = f'horizon must be positive, got {self.horizon}'
            raise InvalidHorizonError(msg)

    @property
    def infinite(self) -> bool:
        """Whether this is the discounted infinite-horizon setting."""
        return self.horizon is None

    @property
    def time_constant(self) -> float:
        """C = sum of gamma^(h-1) over the horizon."""
        return time_constant(self)

    @property
    def label(self) -> str:
        """Short text form used in result tables ('inf' or the step count)."""
        return 'inf' if self.horizon is None else str(self.horizon)

    @classmethod
    def parse(cls, horizon: str | int | None, gamma: float) -> 'HorizonSpec':
        """Build a spec from a table cell ('inf', '', None or an integer)."""
        if horizon is None or horizon in {'inf', ''}:
            return cls(None, gamma)
        return cls(int(horizon), gamma)


def time_constant(horizon: HorizonSpec) -> float:
    """Return the time constant C of a horizon.

    Args:
        horizon: Horizon specification

    Returns:
        sum_{h=1..H} gamma^(h-1), or 1/(1-gamma) for an infinite horizon

    """
    if horizon.horizon is None:
        return 1.0 / (1.0 - horizon.gamma)
    if horizon.gamma == 1.0:
        return float(horizon.horizon)
    return float(sum(horizon.gamma**step for step in range(horizon.horizon)))


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite MDP with rewards in [0, 1].

    ``reward_noise`` holds the spread sigma of the two-point reward law on
    ``{max(0, m - sigma), min(1, m + sigma)}`` whose mean is ``reward_mean``.
    """

    initial_dist: FloatArray
    transition: FloatArray
    reward_mean: FloatArray
    reward_noise: FloatArray

    def __post_init__(self) -> None:
        object.__setattr__(self, 'initial_dist', _frozen(self.initial_dist))
        object.__setattr__(self, 'transition', _frozen(self.transition))
        object.__setattr__(self, 'reward_mean', _frozen(self.reward_mean))
        object.__setattr__(self, 'reward_noise', _frozen(self.reward_noise))

        n_states = self.initial_dist.shape[0]
        if self.transition.ndim != 3 or self.transition.shape[0] != n_states or self.transition.shape[2] != n_states:
            msg = f'transition must have shape (S, A, S), got {self.transition.shape}'
            raise InvalidArgumentError(msg)
        shape = self.transition.shape[:2]
        if self.reward_mean.shape != shape or self.reward_noise.shape != shape:
            raise InvalidArgumentError('reward_mean and reward_noise must have shape (S, A)')
        _check_simplex(self.initial_dist, 'initial_dist')
        _check_simplex(self.transition, 'transition')
        if np.any(self.reward_mean < 0.0) or np.any(self.reward_mean > 1.0):
            raise InvalidArgumentError('reward_mean must lie in [0, 1]')
        if np.any(self.reward_noise < 0.0):
            raise InvalidArgumentError('reward_noise must be non-negative')

    @property
    def n_states(self) -> int:
        """Number of states."""
        return int(self.initial_dist.shape[0])

    @property
    def n_actions(self) -> int:
        """Number of actions."""
        return int(self.transition.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        """(n_states, n_actions)."""
        return self.n_states, self.n_actions

    def reward_support(self) -> tuple[FloatArray, FloatArray, FloatArray]:
        """Return (low, high, probability of high) of the two-point reward law per (s, a)."""
        low = np.maximum(0.0, self.reward_mean - self.reward_noise)
        high = np.minimum(1.0, self.reward_mean + self.reward_noise)
        width = high - low
        p_high = np.divide(self.reward_mean - low, width, out=np.zeros_like(width), where=width > 0.0)
        return low, high, p_high


@dataclass(frozen=True, eq=False)
class Policy:
    """State-conditional action distribution, one row per state."""

    action_probs: FloatArray

    def __post_init__(self) -> None:
        object.__setattr__(self, 'action_probs', _frozen(self.action_probs))
        if self.action_probs.ndim != 2:
            raise InvalidArgumentError('action_probs must have shape (S, A)')
        _check_simplex(self.action_probs, 'policy')

    @property
    def shape(self) -> tuple[int, int]:
        """(n_states, n_actions)."""
        rows, cols = self.action_probs.shape
        return int(rows), int(cols)

    def greedy_actions(self) -> npt.NDArray[np.int64]:
        """Most probable action per state (lowest index on ties)."""
        return np.argmax(self.action_probs, axis=1)


def uniform_policy(n_states: int, n_actions: int) -> Policy:
    """Policy drawing every action with equal probability."""
    return Policy(np.full((n_states, n_actions), 1.0 / n_actions))


def deterministic_policy(actions: npt.ArrayLike, n_actions: int) -> Policy:
    """Policy that always plays ``actions[s]`` in state s."""
    chosen = np.asarray(actions, dtype=np.int64)
    probs = np.zeros((chosen.shape[0], n_actions))
    probs[np.arange(chosen.shape[0]), chosen] = 1.0
    return Policy(probs)


def mix_policies(p1: Policy, p2: Policy, eps: float) -> Policy:
    """Return the rowwise mixture ``eps * p1 + (1 - eps) * p2``."""
    if p1.shape != p2.shape:
        msg = f'policy shapes differ: {p1.shape} vs {p2.shape}'
        raise InvalidArgumentError(msg)
    if not 0.0 <= eps <= 1.0:
        msg = f'eps must lie in [0, 1], got {eps}'
        raise InvalidArgumentError(msg)
    mixed = eps * p1.action_probs + (1.0 - eps) * p2.action_probs
    # exact renormalization keeps rows on the simplex despite rounding
    return Policy(mixed / mixed.sum(axis=1, keepdims=True))


def clip_q(values: npt.ArrayLike, c: float) -> QFunction:
    """Clip a per-(s, a) table elementwise to [0, c]."""
    if c <= 0.0:
        msg = f'clip bound must be positive, got {c}'
        raise InvalidArgumentError(msg)
    return np.clip(np.asarray(values, dtype=np.float64), 0.0, c)


def next_state_values(policy: Policy, f: QFunction) -> FloatArray:
    """v(s') = E_{a' ~ pi(s')} f(s', a')."""
    return np.einsum('sa,sa->s', policy.action_probs, f)


def bellman_backup(mdp: TabularMdp, policy: Policy, f: QFunction, gamma: float) -> QFunction:
    """Unclipped Bellman backup ``r(s, a) + gamma * E[v(s')]``; affine in f."""
    return mdp.reward_mean + gamma * (mdp.transition @ next_state_values(policy, f))


def exact_bellman_apply(mdp: TabularMdp, policy: Policy, f: QFunction, horizon: HorizonSpec) -> QFunction:
    """Apply the true Bellman operator B_pi and clip to [0, C]."""
    return clip_q(bellman_backup(mdp, policy, f, horizon.gamma), horizon.time_constant)


def iteration_cap(c: float) -> int:
    """Iteration budget for infinite-horizon value iteration: 10 * C * ln(C / tol)."""
    return math.ceil(10.0 * c * math.log(c / VALUE_ITERATION_TOLERANCE))


def exact_q(mdp: TabularMdp, policy: Policy, horizon: HorizonSpec) -> QFunction:
    """Compute Q^pi by backward dynamic programming.

    Args:
        mdp: Ground-truth MDP
        policy: Evaluation policy
        horizon: Horizon specification

    Returns:
        Q^pi with values in [0, C]

    Raises:
        ConvergenceError: If infinite-horizon iteration does not settle within the cap

    """
    q = np.zeros(mdp.shape)
    if horizon.horizon is not None:
        for _ in range(horizon.horizon):
            q = exact_bellman_apply(mdp, policy, q, horizon)
        return q

    cap = iteration_cap(horizon.time_constant)
    for step in range(1, cap + 1):
        updated = exact_bellman_apply(mdp, policy, q, horizon)
        change = float(np.max(np.abs(updated - q)))
        q = updated
        if change < VALUE_ITERATION_TOLERANCE:
            logger.debug('Policy evaluation converged after %d iterations', step)
            return q
    msg = f'policy evaluation did not converge within {cap} iterations'
    raise ConvergenceError(msg)


def policy_value(mdp: TabularMdp, policy: Policy, q: QFunction) -> float:
    """J(q) = E_{s ~ S1, a ~ pi(s)} q(s, a)."""
    return float(mdp.initial_dist @ next_state_values(policy, q))


def true_policy_value(mdp: TabularMdp, policy: Policy, horizon: HorizonSpec) -> float:
    """J(pi) computed from the exact Q-function."""
    return policy_value(mdp, policy, exact_q(mdp, policy, horizon))


def state_action_kernel(mdp: TabularMdp, policy: Policy) -> FloatArray:
    """Transition matrix over (s, a) pairs: P[(s,a), (s',a')] = T(s'|s,a) pi(a'|s')."""
    n_states, n_actions = mdp.shape
    kernel = np.einsum('sat,tb->satb', mdp.transition, policy.action_probs)
    return kernel.reshape(n_states * n_actions, n_states * n_actions)


@dataclass(frozen=True, eq=False)
class OccupancyProfile:
    """State-action marginals of a policy and their density ratios against mu.

    ``per_step_marginals`` has shape (H, S, A); for an infinite horizon H is the
    truncation length whose geometric tail weight is below 1e-10.
    """

    per_step_marginals: FloatArray
    discounted_average: FloatArray
    weights_per_step: FloatArray
    weight_avg: FloatArray
    weight_l2_norms: FloatArray
    weight_avg_l2_norm: float

    @property
    def max_weight_l2_norm(self) -> float:
        """max_h ||w_h||_2."""
        return float(np.max(self.weight_l2_norms))


def truncation_length(gamma: float) -> int:
    """Smallest H_t with gamma^H_t below the occupancy tail tolerance."""
    if gamma == 0.0:
        return 1
    return max(1, math.ceil(math.log(OCCUPANCY_TAIL_TOLERANCE) / math.log(gamma)))


def _density_ratio(marginal: FloatArray, mu: FloatArray, step: int) -> FloatArray:
    uncovered = (marginal > 0.0) & (mu <= 0.0)
    if np.any(uncovered):
        state, action = (int(index) for index in np.argwhere(uncovered)[0])
        raise AssumptionViolationError(step, state, action)
    return np.divide(marginal, mu, out=np.zeros_like(marginal), where=mu > 0.0)


def state_action_marginals(mdp: TabularMdp, policy: Policy, steps: int) -> FloatArray:
    """P_1..P_steps, shape (steps, S, A), with P_1 = S1 x pi."""
    kernel = state_action_kernel(mdp, policy)
    marginal = (mdp.initial_dist[:, None] * policy.action_probs).ravel()
    marginals = []
    for _ in range(steps):
        marginals.append(marginal)
        marginal = marginal @ kernel
    return np.stack(marginals).reshape(steps, *mdp.shape)


def discounted_occupancy(mdp: TabularMdp, policy: Policy, gamma: float) -> FloatArray:
    """Infinite-horizon nu solved exactly from nu = (1 - gamma) P_1 + gamma nu P_pi."""
    if not 0.0 <= gamma < 1.0:
        msg = f'the discounted occupancy needs gamma in [0, 1), got {gamma}'
        raise InvalidHorizonError(msg)
    kernel = state_action_kernel(mdp, policy)
    first = (mdp.initial_dist[:, None] * policy.action_probs).ravel()
    system = np.eye(kernel.shape[0]) - gamma * kernel.T
    average = np.linalg.solve(system, (1.0 - gamma) * first)
    return np.maximum(average, 0.0).reshape(mdp.shape)


def occupancy_profile(mdp: TabularMdp, policy: Policy, horizon: HorizonSpec, mu: FloatArray) -> OccupancyProfile:
    """Compute P_h, nu and the weights w_h = P_h / mu, w = nu / mu.

    nu is (1/C) sum_h gamma^(h-1) P_h. For an infinite horizon it is solved
    exactly from nu = (1 - gamma) P_1 + gamma nu P_pi.

    Raises:
        AssumptionViolationError: If some P_h (step h >= 1) or nu (reported as
            step 0) charges a pair where mu is zero

    """
    mu = np.asarray(mu, dtype=np.float64).reshape(mdp.shape)
    _check_simplex(mu.ravel(), 'mu')
    steps = truncation_length(horizon.gamma) if horizon.horizon is None else horizon.horizon
    per_step = state_action_marginals(mdp, policy, steps)

    if horizon.horizon is None:
        average = discounted_occupancy(mdp, policy, horizon.gamma)
    else:
        discounts = horizon.gamma ** np.arange(steps)
        average = np.einsum('h,hsa->sa', discounts, per_step) / horizon.time_constant

    weights = np.stack([_density_ratio(per_step[step], mu, step + 1) for step in range(steps)])
    weight_avg = _density_ratio(average, mu, 0)
    norms = np.sqrt(np.einsum('sa,hsa->h', mu, weights**2))
    avg_norm = float(np.sqrt(np.sum(mu * weight_avg**2)))
    return OccupancyProfile(
        per_step_marginals=_frozen(per_step),
        discounted_average=_frozen(average),
        weights_per_step=_frozen(weights),
        weight_avg=_frozen(weight_avg),
        weight_l2_norms=_frozen(norms),
        weight_avg_l2_norm=avg_norm,
    )


def optimal_q(mdp: TabularMdp, horizon: HorizonSpec) -> QFunction:
    """Optimal action values by value iteration (H steps, or to convergence)."""
    q = np.zeros(mdp.shape)
    steps = horizon.horizon if horizon.horizon is not None else iteration_cap(horizon.time_constant)
    for _ in range(steps):
        updated = mdp.reward_mean + horizon.gamma * (mdp.transition @ q.max(axis=1))
        change = float(np.max(np.abs(updated - q)))
        q = updated
        if horizon.horizon is None and change < VALUE_ITERATION_TOLERANCE:
            return q
    if horizon.horizon is None:
        raise ConvergenceError('value iteration did not converge within the iteration cap')
    return q


def greedy_expert(mdp: TabularMdp, horizon: HorizonSpec) -> Policy:
    """Deterministic policy greedy with respect to the optimal Q (lowest action index on ties)."""
    return deterministic_policy(np.argmax(optimal_q(mdp, horizon), axis=1), mdp.n_actions)


class MdpDocument(BaseModel):
    """Serialized form of a TabularMdp."""

    model_config = ConfigDict(extra='forbid')

    n_states: int = Field(gt=0, description='Number of states')
    n_actions: int = Field(gt=0, description='Number of actions')
    initial_dist: list[float] = Field(description='Initial state distribution S1')
    transition: list[list[float]] = Field(description='Next-state rows in row-major (s, a) order')
    reward_mean: list[list[float]] = Field(description='Mean reward per (s, a)')
    reward_noise: list[list[float]] = Field(description='Two-point reward spread per (s, a)')


def mdp_to_document(mdp: TabularMdp) -> MdpDocument:
    """Convert an MDP to its document model."""
    n_states, n_actions = mdp.shape
    return MdpDocument(
        n_states=n_states,
        n_actions=n_actions,
        initial_dist=mdp.initial_dist.tolist(),
        transition=mdp.transition.reshape(n_states * n_actions, n_states).tolist(),
        reward_mean=mdp.reward_mean.tolist(),
        reward_noise=mdp.reward_noise.tolist(),
    )


def mdp_from_document(document: MdpDocument) -> TabularMdp:
    """Rebuild an MDP from its document model."""
    shape = (document.n_states, document.n_actions)
    try:
        return TabularMdp(
            initial_dist=np.array(document.initial_dist),
            transition=np.array(document.transition).reshape(*shape, document.n_states),
            reward_mean=np.array(document.reward_mean).reshape(shape),
            reward_noise=np.array(document.reward_noise).reshape(shape),
        )
    except ValueError as exc:
        msg = f'MDP document is inconsistent: {exc}'
        raise ConfigurationError(msg) from exc


def dump_mdp(mdp: TabularMdp) -> str:
    """Serialize an MDP to JSON text; floats use shortest round-trip repr."""
    return json.dumps(mdp_to_document(mdp).model_dump(), indent=2)


def parse_mdp(text: str) -> TabularMdp:
    """Parse JSON text produced by :func:`dump_mdp`."""
    try:
        document = MdpDocument.model_validate(json.loads(text))
    except (json.JSONDecodeError, ValidationError) as exc:
        msg = f'Invalid MDP document: {exc}'
        raise ConfigurationError(msg) from exc
    return mdp_from_document(document)


def save_mdp(mdp: TabularMdp, path: Path) -> None:
    """Write an MDP document to ``path``."""
    path.write_text(dump_mdp(mdp) + '\n', encoding='utf-8')


def load_mdp(path: Path) -> TabularMdp:
    """Read an MDP document from ``path``."""
    return parse_mdp(path.read_text(encoding='utf-8'))
