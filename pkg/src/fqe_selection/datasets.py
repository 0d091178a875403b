"""Offline transition datasets, feature maps and their file format."""

import hashlib
import json
import logging
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from fqe_selection.exceptions import ConfigurationError, InvalidArgumentError
from fqe_selection.mdp import FloatArray, TabularMdp
from fqe_selection.rng import make_rng

logger = logging.getLogger(__name__)

IntArray = npt.NDArray[np.int64]
Record = tuple[int, int, float, int]

DEGENERATE_SCALE = 1e-12


def _frozen(array: npt.ArrayLike, dtype: type[np.generic]) -> npt.NDArray[Any]:
    values = np.array(array, dtype=dtype)
    values.setflags(write=False)
    return values


@dataclass(frozen=True, eq=False)
class TransitionDataset:
    """Columnar store of n transition tuples (s, a, r, s')."""

    states: IntArray
    actions: IntArray
    rewards: FloatArray
    next_states: IntArray
    n_states: int
    n_actions: int
    mu_spec: str = 'explicit'
    seed: int = 0
    mu: FloatArray | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, 'states', _frozen(self.states, np.int64))
        object.__setattr__(self, 'actions', _frozen(self.actions, np.int64))
        object.__setattr__(self, 'rewards', _frozen(self.rewards, np.float64))
        object.__setattr__(self, 'next_states', _frozen(self.next_states, np.int64))
        if self.mu is not None:
            object.__setattr__(self, 'mu', _frozen(self.mu, np.float64).reshape(self.n_states, self.n_actions))

        size = self.states.shape[0]
        if size == 0:
            raise InvalidArgumentError('a dataset needs at least one record')
        if not (self.actions.shape[0] == self.rewards.shape[0] == self.next_states.shape[0] == size):
            raise InvalidArgumentError('dataset columns have different lengths')
        for column, bound, name in (
            (self.states, self.n_states, 'state'),
            (self.actions, self.n_actions, 'action'),
            (self.next_states, self.n_states, 'next state'),
        ):
            if np.any(column < 0) or np.any(column >= bound):
                msg = f'{name} id out of range'
                raise InvalidArgumentError(msg)
        if np.any(self.rewards < 0.0) or np.any(self.rewards > 1.0):
            raise InvalidArgumentError('rewards must lie in [0, 1]')

    def __len__(self) -> int:
        return int(self.states.shape[0])

    @property
    def cells(self) -> IntArray:
        """Flat (s, a) index ``s * n_actions + a`` per record."""
        return self.states * self.n_actions + self.actions

    def records(self) -> Iterator[Record]:
        """Iterate over (s, a, r, s') tuples."""
        for state, action, reward, next_state in zip(
            self.states.tolist(), self.actions.tolist(), self.rewards.tolist(), self.next_states.tolist(), strict=True
        ):
            yield state, action, reward, next_state

    def subset(self, indices: npt.ArrayLike) -> 'TransitionDataset':
        """Dataset restricted to the given record indices (order preserved)."""
        chosen = np.asarray(indices, dtype=np.int64)
        return TransitionDataset(
            states=self.states[chosen],
            actions=self.actions[chosen],
            rewards=self.rewards[chosen],
            next_states=self.next_states[chosen],
            n_states=self.n_states,
            n_actions=self.n_actions,
            mu_spec=self.mu_spec,
            seed=self.seed,
            mu=self.mu,
        )

    def cell_counts(self) -> IntArray:
        """Number of records per (s, a), shape (S, A)."""
        counts = np.bincount(self.cells, minlength=self.n_states * self.n_actions)
        return counts.reshape(self.n_states, self.n_actions)

    def fingerprint(self) -> str:
        """Short content hash identifying the records (order-sensitive)."""
        digest = hashlib.sha256()
        for column in (self.states, self.actions, self.rewards, self.next_states):
            digest.update(column.tobytes())
        return digest.hexdigest()[:12]


def sample_dataset(
    mdp: TabularMdp, mu: FloatArray, n: int, seed: int, mu_spec: str = 'explicit'
) -> TransitionDataset:
    """Draw n i.i.d. tuples with (s, a) ~ mu, r ~ R(s, a), s' ~ T(s, a).

    Args:
        mdp: Ground-truth MDP
        mu: Query distribution over (s, a), shape (S, A) or flat
        n: Number of records
        seed: Seed of the 'sample_dataset' stream
        mu_spec: Descriptor stored with the dataset ('uniform', 'explicit', ...)

    Returns:
        The sampled dataset

    """
    if n <= 0:
        msg = f'n must be positive, got {n}'
        raise InvalidArgumentError(msg)
    weights = np.asarray(mu, dtype=np.float64).ravel()
    if weights.shape[0] != mdp.n_states * mdp.n_actions or np.any(weights < 0.0):
        raise InvalidArgumentError('mu must be a non-negative vector over (s, a)')
    if abs(weights.sum() - 1.0) > 1e-12:
        raise InvalidArgumentError('mu must sum to 1')

    rng = make_rng(seed, 'sample_dataset')
    cells = rng.choice(weights.shape[0], size=n, p=weights)
    states, actions = np.divmod(cells, mdp.n_actions)

    low, high, p_high = mdp.reward_support()
    rewards = np.where(rng.random(n) < p_high[states, actions], high[states, actions], low[states, actions])

    cumulative = np.cumsum(mdp.transition[states, actions], axis=1)
    next_states = np.minimum((rng.random(n)[:, None] >= cumulative).sum(axis=1), mdp.n_states - 1)
    logger.debug('Sampled %d transitions with seed %d', n, seed)
    return TransitionDataset(
        states=states,
        actions=actions,
        rewards=rewards,
        next_states=next_states,
        n_states=mdp.n_states,
        n_actions=mdp.n_actions,
        mu_spec=mu_spec,
        seed=seed,
        mu=weights,
    )


def split_indices(n: int, train_fraction: float, seed: int) -> tuple[IntArray, IntArray]:
    """Random disjoint (train, valid) index sets, each sorted."""
    if not 0.0 < train_fraction < 1.0:
        msg = f'train_fraction must lie in (0, 1), got {train_fraction}'
        raise InvalidArgumentError(msg)
    n_train = round(n * train_fraction)
    if n_train in {0, n}:
        msg = f'train_fraction {train_fraction} leaves an empty part of {n} records'
        raise InvalidArgumentError(msg)
    order = make_rng(seed, 'split_dataset').permutation(n)
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def split_dataset(
    d: TransitionDataset, train_fraction: float, seed: int
) -> tuple[TransitionDataset, TransitionDataset]:
    """Partition a dataset at random into (train, valid)."""
    train, valid = split_indices(len(d), train_fraction, seed)
    return d.subset(train), d.subset(valid)


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Embedding of every (s, a) as a vector, with an affine normalization.

    ``table`` has shape (S, A, dim). Until a normalization is fitted, ``mean``
    is zero and ``scale`` is one.
    """

    table: FloatArray
    name: str = 'custom'
    mean: FloatArray | None = None
    scale: FloatArray | None = None

    def __post_init__(self) -> None:
        table = _frozen(self.table, np.float64)
        if table.ndim != 3:
            raise InvalidArgumentError('feature table must have shape (S, A, dim)')
        object.__setattr__(self, 'table', table)
        dim = table.shape[2]
        object.__setattr__(self, 'mean', _frozen(np.zeros(dim) if self.mean is None else self.mean, np.float64))
        object.__setattr__(self, 'scale', _frozen(np.ones(dim) if self.scale is None else self.scale, np.float64))

    @property
    def dim(self) -> int:
        """Embedding dimension."""
        return int(self.table.shape[2])

    @property
    def normalized_table(self) -> FloatArray:
        """Normalized embeddings of every (s, a), shape (S, A, dim)."""
        return (self.table - self.mean) / self.scale

    def embed(self, states: npt.ArrayLike, actions: npt.ArrayLike) -> FloatArray:
        """Normalized embeddings for paired state and action ids, shape (n, dim)."""
        return self.normalized_table[np.asarray(states), np.asarray(actions)]

    def grid(self) -> FloatArray:
        """Normalized embeddings of all cells in flat (s, a) order, shape (S*A, dim)."""
        return self.normalized_table.reshape(-1, self.dim)


def one_hot_features(n_states: int, n_actions: int) -> FeatureMap:
    """Indicator embedding of each (s, a)."""
    eye = np.eye(n_states * n_actions)
    return FeatureMap(eye.reshape(n_states, n_actions, -1), name='one_hot')


def index_features(n_states: int, n_actions: int) -> FeatureMap:
    """Two-dimensional embedding (state index, action index)."""
    states, actions = np.meshgrid(np.arange(n_states), np.arange(n_actions), indexing='ij')
    return FeatureMap(np.stack([states, actions], axis=-1).astype(np.float64), name='index')


def projection_features(n_states: int, n_actions: int, dim: int, seed: int) -> FeatureMap:
    """Random Gaussian projection of the one-hot code onto ``dim`` dimensions."""
    rng = make_rng(seed, 'projection_features')
    projection = rng.standard_normal((n_states * n_actions, dim))
    return FeatureMap(projection.reshape(n_states, n_actions, dim), name=f'projection{dim}')


def fit_feature_normalization(features: FeatureMap, d: TransitionDataset) -> FeatureMap:
    """Fit per-dimension mean and standard deviation on the (s, a) embeddings of d.

    Dimensions whose standard deviation is below 1e-12 are only centered.
    """
    if len(d) < 2:
        raise InvalidArgumentError('normalization needs at least two records')
    raw = features.table[d.states, d.actions]
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    scale = np.where(std < DEGENERATE_SCALE, 1.0, std)
    return FeatureMap(features.table, name=features.name, mean=mean, scale=scale)


class DatasetHeader(BaseModel):
    """First line of a transition file."""

    model_config = ConfigDict(extra='forbid')

    n: int = Field(gt=0, description='Number of records')
    seed: int = Field(description='Seed the records were sampled with')
    n_states: int = Field(gt=0, description='Size of the state space')
    n_actions: int = Field(gt=0, description='Size of the action space')
    mu_spec: str = Field(description="Query distribution descriptor, e.g. 'uniform'")
    mu: list[float] | None = Field(default=None, description='Explicit query distribution in flat (s, a) order')


class TransitionRecord(BaseModel):
    """One record line of a transition file."""

    model_config = ConfigDict(extra='forbid')

    s: int
    a: int
    r: float
    s_next: int


def dump_dataset(d: TransitionDataset) -> str:
    """Serialize a dataset as line-delimited JSON (header line first)."""
    header = DatasetHeader(
        n=len(d),
        seed=d.seed,
        n_states=d.n_states,
        n_actions=d.n_actions,
        mu_spec=d.mu_spec,
        mu=None if d.mu is None else d.mu.ravel().tolist(),
    )
    lines = [json.dumps(header.model_dump())]
    lines.extend(
        json.dumps({'s': state, 'a': action, 'r': reward, 's_next': next_state})
        for state, action, reward, next_state in d.records()
    )
    return '\n'.join(lines) + '\n'


def parse_dataset(text: str) -> TransitionDataset:
    """Parse the output of :func:`dump_dataset`."""
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise ConfigurationError('transition file is empty')
    try:
        header = DatasetHeader.model_validate(json.loads(lines[0]))
        records = [TransitionRecord.model_validate(json.loads(line)) for line in lines[1:]]
    except (json.JSONDecodeError, ValidationError) as exc:
        msg = f'Invalid transition file: {exc}'
        raise ConfigurationError(msg) from exc
    if len(records) != header.n:
        msg = f'header announces {header.n} records, file holds {len(records)}'
        raise ConfigurationError(msg)
    try:
        return TransitionDataset(
            states=np.array([record.s for record in records]),
            actions=np.array([record.a for record in records]),
            rewards=np.array([record.r for record in records]),
            next_states=np.array([record.s_next for record in records]),
            n_states=header.n_states,
            n_actions=header.n_actions,
            mu_spec=header.mu_spec,
            seed=header.seed,
            mu=None if header.mu is None else np.array(header.mu),
        )
    except InvalidArgumentError as exc:
        msg = f'Invalid transition file: {exc}'
        raise ConfigurationError(msg) from exc


def save_dataset(d: TransitionDataset, path: Path) -> None:
    """Write a transition file."""
    path.write_text(dump_dataset(d), encoding='utf-8')


def load_dataset(path: Path) -> TransitionDataset:
    """Read a transition file."""
    return parse_dataset(path.read_text(encoding='utf-8'))


FEATURE_KINDS = ('one_hot', 'index', 'projection')


def feature_map_by_name(name: str, n_states: int, n_actions: int, dim: int = 4, seed: int = 0) -> FeatureMap:
    """Build one of the stock feature maps ('one_hot', 'index', 'projection')."""
    if name == 'one_hot':
        return one_hot_features(n_states, n_actions)
    if name == 'index':
        return index_features(n_states, n_actions)
    if name == 'projection':
        return projection_features(n_states, n_actions, dim, seed)
    msg = f'unknown feature map {name!r}; expected one of {FEATURE_KINDS}'
    raise InvalidArgumentError(msg)
