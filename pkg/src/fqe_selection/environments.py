"""Synthetic tabular MDP families used by the benchmarks."""

import numpy as np

from fqe_selection.exceptions import InvalidArgumentError
from fqe_selection.mdp import TabularMdp
from fqe_selection.rng import make_rng


def garnet(
    n_states: int,
    n_actions: int,
    branching: int,
    seed: int,
    reward_low: float = 0.0,
    reward_high: float = 1.0,
    reward_noise: float = 0.1,
) -> TabularMdp:
    """Generate a random garnet-style MDP.

    Args:
        n_states: Number of states
        n_actions: Number of actions
        branching: Number of distinct successor states per (s, a)
        seed: Generator seed
        reward_low: Lower end of the reward-mean range
        reward_high: Upper end of the reward-mean range
        reward_noise: Two-point reward spread applied to every (s, a)

    Returns:
        A TabularMdp with Dirichlet transition rows over ``branching`` successors

    """
    if not 1 <= branching <= n_states:
        msg = f'branching must lie in [1, {n_states}], got {branching}'
        raise InvalidArgumentError(msg)
    if not 0.0 <= reward_low <= reward_high <= 1.0:
        raise InvalidArgumentError('reward range must satisfy 0 <= low <= high <= 1')

    rng = make_rng(seed, 'garnet')
    transition = np.zeros((n_states, n_actions, n_states))
    for state in range(n_states):
        for action in range(n_actions):
            successors = rng.choice(n_states, size=branching, replace=False)
            transition[state, action, successors] = rng.dirichlet(np.ones(branching))
    return TabularMdp(
        initial_dist=rng.dirichlet(np.ones(n_states)),
        transition=transition,
        reward_mean=rng.uniform(reward_low, reward_high, size=(n_states, n_actions)),
        reward_noise=np.full((n_states, n_actions), reward_noise),
    )


def inventory_chain(
    capacity: int = 5,
    n_orders: int = 3,
    demand_probs: tuple[float, ...] = (0.3, 0.4, 0.3),
    price: float = 2.0,
    order_cost: float = 1.0,
    holding_cost: float = 0.1,
    reward_noise: float = 0.05,
) -> TabularMdp:
    """Single-item inventory MDP.

    States are stock levels 0..capacity, actions order 0..n_orders-1 units,
    demand d follows ``demand_probs`` over 0..len-1. Profit (sales revenue
    minus ordering and holding cost) is mapped affinely onto [0, 1].
    """
    n_states = capacity + 1
    demand = np.asarray(demand_probs, dtype=np.float64)
    transition = np.zeros((n_states, n_orders, n_states))
    profit = np.zeros((n_states, n_orders))
    for stock in range(n_states):
        for order in range(n_orders):
            available = min(capacity, stock + order)
            for units, probability in enumerate(demand):
                sold = min(available, units)
                transition[stock, order, available - sold] += probability
                profit[stock, order] += probability * price * sold
            profit[stock, order] -= order_cost * order + holding_cost * stock

    span = profit.max() - profit.min()
    reward = (profit - profit.min()) / span if span > 0.0 else np.full_like(profit, 0.5)
    initial = np.zeros(n_states)
    initial[n_states // 2] = 1.0
    return TabularMdp(
        initial_dist=initial,
        transition=transition,
        reward_mean=reward,
        reward_noise=np.full_like(reward, reward_noise),
    )


def discrimination_benchmark(seed: int = 0) -> TabularMdp:
    """Small low-reward garnet on which an exact candidate must beat a shifted one."""
    return garnet(6, 2, branching=3, seed=seed, reward_low=0.0, reward_high=0.1, reward_noise=0.05)
