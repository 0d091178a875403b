"""Shared fixtures: small MDPs with known structure."""

import numpy as np
import pytest

from fqe_selection.environments import garnet
from fqe_selection.mdp import HorizonSpec, Policy, TabularMdp, uniform_policy


@pytest.fixture
def two_state_mdp() -> TabularMdp:
    """Two states, two actions; action 1 moves to the other state, rewards differ per action."""
    transition = np.zeros((2, 2, 2))
    transition[0, 0, 0] = 1.0
    transition[0, 1, 1] = 1.0
    transition[1, 0, 1] = 1.0
    transition[1, 1, 0] = 1.0
    return TabularMdp(
        initial_dist=np.array([1.0, 0.0]),
        transition=transition,
        reward_mean=np.array([[0.2, 0.0], [1.0, 0.5]]),
        reward_noise=np.full((2, 2), 0.1),
    )


@pytest.fixture
def small_garnet() -> TabularMdp:
    """Four-state garnet with two actions."""
    return garnet(4, 2, branching=2, seed=7)


@pytest.fixture
def uniform_mu() -> np.ndarray:
    """Uniform data distribution over the 4 x 2 garnet."""
    return np.full((4, 2), 1.0 / 8.0)


@pytest.fixture
def garnet_policy() -> Policy:
    """Uniform policy on the 4 x 2 garnet."""
    return uniform_policy(4, 2)


@pytest.fixture
def finite_horizon() -> HorizonSpec:
    """Three undiscounted steps."""
    return HorizonSpec(3, 1.0)
