"""Approximate Bellman operators, FQE regressors and candidate sets.

An operator maps a bounded Q-function to a bounded Q-function. Every concrete
operator provides an unclipped ``raw_apply``; :meth:`BellmanOperator.apply`
composes it with the clip to [0, C].
"""

import json
import logging
from abc import ABC, abstractmethod
from collections.abc import Callable, Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal, TypeVar

import numpy as np
import scipy.linalg
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from scipy.spatial.distance import cdist

from fqe_selection.datasets import (
    FeatureMap,
    IntArray,
    TransitionDataset,
    feature_map_by_name,
    fit_feature_normalization,
)
from fqe_selection.exceptions import ConfigurationError, InvalidArgumentError, SingularSystemError
from fqe_selection.mdp import (
    FloatArray,
    HorizonSpec,
    Policy,
    QFunction,
    TabularMdp,
    bellman_backup,
    clip_q,
    exact_q,
    next_state_values,
)
from fqe_selection.rng import derive_seed, make_rng

logger = logging.getLogger(__name__)

__all__ = [
    'BellmanOperator',
    'CandidateManifest',
    'CandidateSet',
    'CandidateSpec',
    'ExactBellmanOperator',
    'FqeOperator',
    'IdentityOperator',
    'KnnRegressor',
    'Regressor',
    'RidgeRegressor',
    'ShiftedOperator',
    'TabularMeanRegressor',
    'apply_operator',
    'bellman_error_l2',
    'bellman_residuals',
    'build_candidate_set',
    'clip_q',
    'default_candidate_specs',
    'fit_fqe_operator',
    'load_candidate_manifest',
    'operator_error_sup',
    'parse_candidate_manifest',
]

ANALYTIC = 'analytic'
TIE_TOLERANCE = 1e-12


class BellmanOperator(ABC):
    """A clip-composed operator X on Q-functions over a fixed horizon."""

    kind: str = 'abstract'

    def __init__(
        self, candidate_id: str, horizon: HorizonSpec, shape: tuple[int, int], fitted_on: str = ANALYTIC
    ) -> None:
        self.id = candidate_id
        self.horizon = horizon
        self.shape = shape
        self.fitted_on = fitted_on

    @property
    def hyperparameters(self) -> dict[str, Any]:
        """Hyperparameters identifying this configuration."""
        return {}

    @abstractmethod
    def raw_apply(self, f: QFunction) -> QFunction:
        """Apply the operator without clipping.

        Args:
            f: Q-function of shape (S, A)

        Returns:
            Unclipped image of f

        """
        ...  # pragma: no cover

    def apply(self, f: QFunction) -> QFunction:
        """Apply the operator and clip the result to [0, C]."""
        return clip_q(self.raw_apply(f), self.horizon.time_constant)

    def __repr__(self) -> str:
        return f'{type(self).__name__}(id={self.id!r}, kind={self.kind!r}, fitted_on={self.fitted_on!r})'


class ExactBellmanOperator(BellmanOperator):
    """The true Bellman operator B_pi of a known MDP."""

    kind = 'exact_tabular'

    def __init__(
        self, mdp: TabularMdp, policy: Policy, horizon: HorizonSpec, candidate_id: str = 'exact_tabular'
    ) -> None:
        super().__init__(candidate_id, horizon, mdp.shape)
        self.mdp = mdp
        self.policy = policy

    def raw_apply(self, f: QFunction) -> QFunction:
        return bellman_backup(self.mdp, self.policy, f, self.horizon.gamma)


class IdentityOperator(BellmanOperator):
    """Id: f -> f, the operator scored by the fixed-point losses."""

    kind = 'identity'

    def __init__(self, horizon: HorizonSpec, shape: tuple[int, int]) -> None:
        super().__init__('identity', horizon, shape)

    def raw_apply(self, f: QFunction) -> QFunction:
        return np.array(f, dtype=np.float64)


class ShiftedOperator(BellmanOperator):
    """Base operator plus a constant or per-(s, a) offset, applied before clipping."""

    def __init__(self, base: BellmanOperator, shift: float | FloatArray, candidate_id: str) -> None:
        super().__init__(candidate_id, base.horizon, base.shape, base.fitted_on)
        self.base = base
        self.shift = np.asarray(shift, dtype=np.float64)
        self.kind = 'constant_shift' if self.shift.ndim == 0 else 'perturbed'

    @property
    def hyperparameters(self) -> dict[str, Any]:
        shift: float | list[list[float]] = float(self.shift) if self.shift.ndim == 0 else self.shift.tolist()
        return {'base': self.base.id, 'shift': shift}

    def raw_apply(self, f: QFunction) -> QFunction:
        return self.base.raw_apply(f) + self.shift


# Regressors ---------------------------------------------------------------


class RegressorParams(BaseModel):
    """Parameters shared by every FQE regressor family."""

    model_config = ConfigDict(extra='forbid')

    sample_next_action: bool = Field(
        default=False, description="Use one sampled a' per record instead of the expectation over pi(s')"
    )


class TabularMeanParams(RegressorParams):
    """tabular_mean takes no hyperparameters."""


class RidgeParams(RegressorParams):
    """Hyperparameters of ridge-regression FQE."""

    lam: float = Field(ge=0.0, description='Penalty on the (1/n)-scaled normal equations')
    features: Literal['one_hot', 'index', 'projection'] = Field(default='projection', description='Feature map')
    dim: int = Field(default=4, gt=0, description='Projection dimension')
    feature_seed: int = Field(default=0, description='Seed of the random projection')


class KnnParams(RegressorParams):
    """Hyperparameters of k-nearest-neighbor FQE."""

    k: int = Field(gt=0, description='Number of neighbors (clamped to n)')
    features: Literal['one_hot', 'index', 'projection'] = Field(default='index', description='Feature map')
    dim: int = Field(default=4, gt=0, description='Projection dimension')
    feature_seed: int = Field(default=0, description='Seed of the random projection')


class Regressor(ABC):
    """Least-squares regression of targets on (s, a) within a hypothesis class.

    ``fit`` caches everything that does not depend on the targets; each
    ``predict_grid`` call then solves the regression for new targets and
    returns predictions for every (s, a) in flat order.
    """

    def __init__(self, params: RegressorParams) -> None:
        self.params = params

    @classmethod
    @abstractmethod
    def params_model(cls) -> type[RegressorParams]:
        """Return the Pydantic model for validating this regressor's hyperparameters."""
        ...  # pragma: no cover

    @abstractmethod
    def fit(self, train: TransitionDataset) -> None:
        """Cache the target-independent state computed from the training records."""
        ...  # pragma: no cover

    @abstractmethod
    def predict_grid(self, targets: FloatArray) -> FloatArray:
        """Regress ``targets`` (one per training record) and predict every (s, a)."""
        ...  # pragma: no cover


class RegressorRegistry:
    """Maps regressor kinds to their classes."""

    def __init__(self) -> None:
        self._regressors: dict[str, type[Regressor]] = {}

    def register(self, kind: str, regressor_class: type[Regressor]) -> None:
        """Register a regressor class under ``kind``."""
        self._regressors[kind] = regressor_class

    def get_registered(self) -> dict[str, type[Regressor]]:
        """Return a copy of the registered kinds."""
        return self._regressors.copy()

    def create(self, kind: str, params: dict[str, Any]) -> Regressor:
        """Validate ``params`` and instantiate the regressor for ``kind``.

        Raises:
            ConfigurationError: If the kind is unknown or the parameters are invalid

        """
        if kind not in self._regressors:
            msg = f'no regressor registered for kind {kind!r}'
            raise ConfigurationError(msg)
        regressor_class = self._regressors[kind]
        try:
            validated = regressor_class.params_model().model_validate(params)
        except ValidationError as exc:
            msg = f'invalid parameters for {kind!r}: {exc}'
            raise ConfigurationError(msg) from exc
        return regressor_class(validated)


global_registry = RegressorRegistry()


def register_regressor(kind: str) -> Callable[[type[Regressor]], type[Regressor]]:
    """Decorator to register a regressor class with the global registry.

    Args:
        kind: Candidate kind the class implements

    Returns:
        Decorator function

    """

    def decorator(regressor_class: type[Regressor]) -> type[Regressor]:
        global_registry.register(kind, regressor_class)
        return regressor_class

    return decorator


def _normalized_features(
    train: TransitionDataset, name: str, dim: int, seed: int
) -> tuple[FeatureMap, FloatArray]:
    features = feature_map_by_name(name, train.n_states, train.n_actions, dim=dim, seed=seed)
    if len(train) >= 2:
        features = fit_feature_normalization(features, train)
    return features, features.embed(train.states, train.actions)


@register_regressor('tabular_mean')
class TabularMeanRegressor(Regressor):
    """Per-(s, a) average of the targets; unvisited cells predict the global mean."""

    @classmethod
    def params_model(cls) -> type[RegressorParams]:
        return TabularMeanParams

    def fit(self, train: TransitionDataset) -> None:
        self._cells = train.cells
        self._n_cells = train.n_states * train.n_actions
        self._counts = np.bincount(self._cells, minlength=self._n_cells)

    def predict_grid(self, targets: FloatArray) -> FloatArray:
        sums = np.bincount(self._cells, weights=targets, minlength=self._n_cells)
        fallback = np.full(self._n_cells, float(np.mean(targets)))
        return np.divide(sums, self._counts, out=fallback, where=self._counts > 0)


@register_regressor('fqe_ridge')
class RidgeRegressor(Regressor):
    """Ridge regression on normalized features with an unpenalized intercept.

    Features are standardized on the training records, so the intercept is
    the target mean. The weights solve (Phi'Phi / n + lam I) w = Phi'(y - ybar) / n.
    """

    params: RidgeParams

    @classmethod
    def params_model(cls) -> type[RegressorParams]:
        return RidgeParams

    def fit(self, train: TransitionDataset) -> None:
        features, design = _normalized_features(train, self.params.features, self.params.dim, self.params.feature_seed)
        n, dim = design.shape
        gram = design.T @ design / n + self.params.lam * np.eye(dim)
        if self.params.lam == 0.0 and np.linalg.matrix_rank(gram) < dim:
            msg = f'normal equations are rank deficient ({dim} features, lam=0)'
            raise SingularSystemError(msg)
        try:
            self._factor = scipy.linalg.cho_factor(gram)
        except np.linalg.LinAlgError as exc:
            msg = f'cannot factor the ridge Gram matrix: {exc}'
            raise SingularSystemError(msg) from exc
        self._design = design
        self._grid = features.grid()

    def predict_grid(self, targets: FloatArray) -> FloatArray:
        intercept = float(np.mean(targets))
        rhs = self._design.T @ (targets - intercept) / targets.shape[0]
        weights = scipy.linalg.cho_solve(self._factor, rhs)
        return intercept + self._grid @ weights


@register_regressor('fqe_knn')
class KnnRegressor(Regressor):
    """k-nearest-neighbor average in normalized feature space.

    Records at exactly the k-th distance share the remaining weight equally,
    so predictions do not depend on the order of the training records.
    """

    params: KnnParams

    @classmethod
    def params_model(cls) -> type[RegressorParams]:
        return KnnParams

    def fit(self, train: TransitionDataset) -> None:
        features, design = _normalized_features(train, self.params.features, self.params.dim, self.params.feature_seed)
        distances = cdist(features.grid(), design)
        k = min(self.params.k, len(train))
        kth = np.sort(distances, axis=1)[:, k - 1 : k]
        slack = TIE_TOLERANCE * np.maximum(1.0, kth)
        closer = distances < kth - slack
        tied = ~closer & (distances <= kth + slack)
        n_closer = closer.sum(axis=1, keepdims=True)
        n_tied = tied.sum(axis=1, keepdims=True)
        self._weights = (closer + tied * (k - n_closer) / n_tied) / k

    def predict_grid(self, targets: FloatArray) -> FloatArray:
        return self._weights @ targets


class FqeOperator(BellmanOperator):
    """The least-squares FQE operator over one regressor family.

    Applying it to f builds targets r + gamma * E_{a' ~ pi(s')} f(s', a') on the
    training records and regresses them; only the targets change between calls.
    """

    def __init__(
        self,
        train: TransitionDataset,
        policy: Policy,
        horizon: HorizonSpec,
        kind: str,
        params: dict[str, Any],
        candidate_id: str,
        seed: int = 0,
    ) -> None:
        super().__init__(candidate_id, horizon, (train.n_states, train.n_actions), train.fingerprint())
        self.kind = kind
        self.policy = policy
        self.regressor = global_registry.create(kind, params)
        self.regressor.fit(train)
        self._rewards = train.rewards
        self._next_states = train.next_states
        self._next_actions: IntArray | None = None
        if self.regressor.params.sample_next_action:
            rng = make_rng(derive_seed(seed, candidate_id), 'next_actions')
            probs = policy.action_probs[train.next_states]
            draws = rng.random(len(train))[:, None]
            cumulative = np.cumsum(probs, axis=1)
            self._next_actions = np.minimum((draws >= cumulative).sum(axis=1), train.n_actions - 1)

    @property
    def hyperparameters(self) -> dict[str, Any]:
        return self.regressor.params.model_dump()

    def targets(self, f: QFunction) -> FloatArray:
        """Regression targets for f on the training records."""
        if self._next_actions is None:
            continuation = next_state_values(self.policy, f)[self._next_states]
        else:
            continuation = f[self._next_states, self._next_actions]
        return self._rewards + self.horizon.gamma * continuation

    def raw_apply(self, f: QFunction) -> QFunction:
        return self.regressor.predict_grid(self.targets(f)).reshape(self.shape)


def apply_operator(x: BellmanOperator, f: QFunction) -> QFunction:
    """Return X f, clipped to [0, C]."""
    return x.apply(f)


def bellman_residuals(x: BellmanOperator, f: QFunction, d: TransitionDataset, policy: Policy) -> FloatArray:
    """Per-record residuals r + gamma * E_{a' ~ pi(s')} f(s', a') - (X f)(s, a) on d."""
    continuation = next_state_values(policy, f)[d.next_states]
    return d.rewards + x.horizon.gamma * continuation - x.apply(f)[d.states, d.actions]


def bellman_error_l2(x: BellmanOperator, f: QFunction, mdp: TabularMdp, policy: Policy, mu: FloatArray) -> float:
    """||(X - B_pi) f||_2 under mu (oracle).

    Args:
        x: Candidate operator
        f: Q-function the residual is evaluated at
        mdp: Ground-truth MDP
        policy: Evaluation policy
        mu: Data distribution over (s, a)

    Returns:
        sqrt(sum mu(s, a) * ((X f)(s, a) - (B_pi f)(s, a))^2)

    """
    residual = x.apply(f) - bellman_backup(mdp, policy, f, x.horizon.gamma)
    weights = np.asarray(mu, dtype=np.float64).reshape(mdp.shape)
    return float(np.sqrt(np.sum(weights * residual**2)))


def probe_functions(
    mdp: TabularMdp, policy: Policy, horizon: HorizonSpec, probe_count: int, seed: int = 0
) -> list[QFunction]:
    """Probe Q-functions: 0, C, Q^pi, then uniform random tables from one stream.

    The list for a larger count always extends the list for a smaller one.
    """
    if probe_count < 1:
        msg = f'probe_count must be positive, got {probe_count}'
        raise InvalidArgumentError(msg)
    c = horizon.time_constant
    probes = [np.zeros(mdp.shape), np.full(mdp.shape, c), exact_q(mdp, policy, horizon)]
    rng = make_rng(seed, 'operator_probes')
    while len(probes) < probe_count:
        probes.append(rng.uniform(0.0, c, size=mdp.shape))
    return probes[:probe_count]


def operator_error_sup(
    x: BellmanOperator, mdp: TabularMdp, policy: Policy, mu: FloatArray, probe_count: int, seed: int = 0
) -> float:
    """Lower estimate of ||X - B_pi||_2: the largest Bellman error over the probe functions."""
    probes = probe_functions(mdp, policy, x.horizon, probe_count, seed)
    return max(bellman_error_l2(x, f, mdp, policy, mu) for f in probes)


@dataclass(frozen=True)
class CandidateSet:
    """Ordered, non-empty collection of operators with unique ids."""

    candidates: tuple[BellmanOperator, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, 'candidates', tuple(self.candidates))
        if not self.candidates:
            raise InvalidArgumentError('a candidate set needs at least one operator')
        ids = [candidate.id for candidate in self.candidates]
        duplicates = sorted({candidate_id for candidate_id in ids if ids.count(candidate_id) > 1})
        if duplicates:
            msg = f'duplicate candidate ids: {duplicates}'
            raise InvalidArgumentError(msg)

    def __len__(self) -> int:
        return len(self.candidates)

    def __iter__(self) -> Iterator[BellmanOperator]:
        return iter(self.candidates)

    def __getitem__(self, index: int) -> BellmanOperator:
        return self.candidates[index]

    def __contains__(self, x: object) -> bool:
        return any(candidate is x for candidate in self.candidates)

    @property
    def ids(self) -> list[str]:
        """Candidate ids in order."""
        return [candidate.id for candidate in self.candidates]

    def index_of(self, x: BellmanOperator) -> int:
        """Position of x in the set.

        Raises:
            InvalidArgumentError: If x is not a member

        """
        for index, candidate in enumerate(self.candidates):
            if candidate is x:
                return index
        msg = f'operator {x.id!r} is not in the candidate set'
        raise InvalidArgumentError(msg)


# Manifests ----------------------------------------------------------------

CandidateKind = Literal['exact_tabular', 'tabular_mean', 'fqe_ridge', 'fqe_knn', 'constant_shift', 'perturbed']
FQE_KINDS = ('tabular_mean', 'fqe_ridge', 'fqe_knn')


class CandidateSpec(BaseModel):
    """One candidate configuration in a manifest."""

    model_config = ConfigDict(extra='forbid')

    id: str = Field(min_length=1, description='Unique label of the candidate')
    kind: CandidateKind = Field(description='Operator family')
    params: dict[str, Any] = Field(default_factory=dict, description='Family-specific hyperparameters')


class ShiftParams(BaseModel):
    """Parameters of a constant_shift candidate."""

    model_config = ConfigDict(extra='forbid')

    base: str = Field(description='Id of an earlier candidate, or exact_tabular')
    shift: float = Field(description='Constant added before clipping')


class PerturbParams(BaseModel):
    """Parameters of a perturbed candidate: base plus a uniform random table in [-scale, scale]."""

    model_config = ConfigDict(extra='forbid')

    base: str = Field(description='Id of an earlier candidate, or exact_tabular')
    scale: float = Field(ge=0.0, description='Half-width of the perturbation')
    seed: int = Field(default=0, description='Seed of the perturbation table')


class CandidateManifest(BaseModel):
    """Candidate-set manifest file."""

    model_config = ConfigDict(extra='forbid')

    candidates: list[CandidateSpec] = Field(min_length=1, description='Candidates in selection order')


def parse_candidate_manifest(text: str) -> list[CandidateSpec]:
    """Parse manifest JSON into candidate specs."""
    try:
        manifest = CandidateManifest.model_validate(json.loads(text))
    except (json.JSONDecodeError, ValidationError) as exc:
        msg = f'Invalid candidate manifest: {exc}'
        raise ConfigurationError(msg) from exc
    return manifest.candidates


def load_candidate_manifest(path: Path) -> list[CandidateSpec]:
    """Read a candidate manifest file."""
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as exc:
        msg = f'cannot read candidate manifest {path}: {exc}'
        raise ConfigurationError(msg) from exc
    return parse_candidate_manifest(text)


def default_candidate_specs() -> list[CandidateSpec]:
    """The stock eight-operator grid, from well-specified to broken."""
    specs = [CandidateSpec(id='tabular_mean', kind='tabular_mean')]
    specs.extend(
        CandidateSpec(id=f'ridge_{lam:g}', kind='fqe_ridge', params={'lam': lam, 'features': 'projection'})
        for lam in (1e-4, 1e-2, 1.0)
    )
    specs.extend(
        CandidateSpec(id=f'knn_{k}', kind='fqe_knn', params={'k': k, 'features': 'index'}) for k in (1, 8, 64)
    )
    specs.append(
        CandidateSpec(id='tabular_mean+0.5', kind='constant_shift', params={'base': 'tabular_mean', 'shift': 0.5})
    )
    return specs


def fit_fqe_operator(
    train: TransitionDataset, policy: Policy, regressor_spec: CandidateSpec, horizon: HorizonSpec, seed: int = 0
) -> FqeOperator:
    """Fit the FQE operator described by ``regressor_spec`` on the training data.

    Raises:
        ConfigurationError: If the spec is not an FQE family or its parameters are invalid
        SingularSystemError: If ridge normal equations with lam = 0 are singular

    """
    if regressor_spec.kind not in FQE_KINDS:
        msg = f'{regressor_spec.id!r} is not an FQE candidate (kind {regressor_spec.kind!r})'
        raise ConfigurationError(msg)
    operator = FqeOperator(
        train, policy, horizon, regressor_spec.kind, regressor_spec.params, regressor_spec.id, seed=seed
    )
    logger.debug('Fitted %r on %d records', operator, len(train))
    return operator


ModelT = TypeVar('ModelT', bound=BaseModel)


def _validated(model: type[ModelT], spec: CandidateSpec) -> ModelT:
    try:
        return model.model_validate(spec.params)
    except ValidationError as exc:
        msg = f'invalid parameters for {spec.id!r}: {exc}'
        raise ConfigurationError(msg) from exc


def build_candidate_set(
    specs: Sequence[CandidateSpec],
    train: TransitionDataset,
    policy: Policy,
    horizon: HorizonSpec,
    mdp: TabularMdp | None = None,
    workers: int = 1,
    seed: int = 0,
) -> CandidateSet:
    """Build every candidate in ``specs``; FQE fits run in a thread pool.

    Args:
        specs: Candidate specs in selection order
        train: Training split the FQE candidates are fitted on
        policy: Evaluation policy
        horizon: Horizon specification
        mdp: Ground-truth MDP, required by exact_tabular candidates and bases
        workers: Number of fitting threads
        seed: Seed for sampled-action targets and perturbation tables

    Returns:
        The candidate set, in manifest order

    Raises:
        ConfigurationError: On duplicate ids, unknown bases, or exact candidates without an MDP

    """
    ids = [spec.id for spec in specs]
    if len(set(ids)) != len(ids):
        msg = f'candidate ids must be unique, got {ids}'
        raise ConfigurationError(msg)

    def exact(candidate_id: str) -> ExactBellmanOperator:
        if mdp is None:
            msg = f'candidate {candidate_id!r} needs the ground-truth MDP'
            raise ConfigurationError(msg)
        return ExactBellmanOperator(mdp, policy, horizon, candidate_id)

    fqe_specs = [spec for spec in specs if spec.kind in FQE_KINDS]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        fitted = list(pool.map(lambda spec: fit_fqe_operator(train, policy, spec, horizon, seed), fqe_specs))
    built: dict[str, BellmanOperator] = {operator.id: operator for operator in fitted}

    ordered: list[BellmanOperator] = []
    for spec in specs:
        if spec.kind == 'exact_tabular':
            built[spec.id] = exact(spec.id)
        elif spec.kind in {'constant_shift', 'perturbed'}:
            params: ShiftParams | PerturbParams
            params = _validated(ShiftParams if spec.kind == 'constant_shift' else PerturbParams, spec)
            if params.base in built:
                base = built[params.base]
            elif params.base == 'exact_tabular':
                base = exact('exact_tabular')
            else:
                msg = f'candidate {spec.id!r} refers to unknown base {params.base!r}'
                raise ConfigurationError(msg)
            if isinstance(params, ShiftParams):
                shift: float | FloatArray = params.shift
            else:
                rng = make_rng(derive_seed(seed, spec.id, params.seed), 'perturbation')
                shift = rng.uniform(-params.scale, params.scale, size=(train.n_states, train.n_actions))
            built[spec.id] = ShiftedOperator(base, shift, spec.id)
        ordered.append(built[spec.id])
    logger.info('Built %d candidates: %s', len(ordered), ', '.join(ids))
    return CandidateSet(tuple(ordered))
