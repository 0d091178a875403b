"""Kernels on (s, a), dual RKHS norms and the kernel Bellman V-statistic.

Kernels compare (s, a) pairs through a :class:`FeatureMap`, so the Gram matrix
over the finite state-action space is the only object the oracles need.
"""

import logging
import math
import re
from dataclasses import dataclass
from typing import Literal

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist

from fqe_selection.datasets import FeatureMap, IntArray, TransitionDataset
from fqe_selection.exceptions import ConfigurationError, InvalidArgumentError, KernelNotPsdError
from fqe_selection.mdp import FloatArray, Policy, QFunction
from fqe_selection.operators import BellmanOperator, bellman_residuals
from fqe_selection.rng import make_rng

logger = logging.getLogger(__name__)

KernelKind = Literal['gaussian', 'exponential', 'constant']

PSD_SLACK = 1e-10
RANGE_TOLERANCE = 1e-8

EXPONENTIAL_KERNEL_GRID = tuple(f'exp:p={p}:sigma={sigma:g}' for p in (1, 2) for sigma in (0.1, 1.0, 10.0))

_SPEC_PATTERN = re.compile(r'^(?P<kind>exp|gauss|const)((?::(?:p=(?P<p>\d+)|sigma=(?P<sigma>[^:]+)))*)$')


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and bandwidth, independent of any feature map."""

    kind: KernelKind
    sigma: float = 1.0
    p: int = 2

    def __post_init__(self) -> None:
        if self.kind == 'constant':
            return
        if not self.sigma > 0.0:
            msg = f'kernel bandwidth must be positive, got {self.sigma}'
            raise InvalidArgumentError(msg)
        if self.kind == 'exponential' and self.p not in {1, 2}:
            msg = f'exponential kernel needs p in {{1, 2}}, got {self.p}'
            raise InvalidArgumentError(msg)

    @property
    def text(self) -> str:
        """Canonical spec string, e.g. 'exp:p=1:sigma=0.1'."""
        if self.kind == 'constant':
            return 'const'
        if self.kind == 'gaussian':
            return f'gauss:sigma={self.sigma:g}'
        return f'exp:p={self.p}:sigma={self.sigma:g}'

    def bind(self, features: FeatureMap) -> 'Kernel':
        """Attach a feature map."""
        return Kernel(self, features)


def parse_kernel_spec(text: str) -> KernelSpec:
    """Parse 'exp:p=1:sigma=0.1', 'gauss:sigma=1.0' or 'const'.

    Raises:
        ConfigurationError: If the text does not follow the grammar
        InvalidArgumentError: If sigma or p are out of range

    """
    match = _SPEC_PATTERN.match(text.strip())
    if match is None:
        msg = f'cannot parse kernel spec {text!r}'
        raise ConfigurationError(msg)
    kind = match.group('kind')
    if kind == 'const':
        if match.group(2):
            msg = f'constant kernel takes no parameters: {text!r}'
            raise ConfigurationError(msg)
        return KernelSpec('constant')
    try:
        sigma = float(match.group('sigma')) if match.group('sigma') is not None else 1.0
    except ValueError as exc:
        msg = f'invalid sigma in kernel spec {text!r}'
        raise ConfigurationError(msg) from exc
    if kind == 'gauss':
        if match.group('p') is not None:
            msg = f'gaussian kernel takes no p: {text!r}'
            raise ConfigurationError(msg)
        return KernelSpec('gaussian', sigma=sigma)
    p = int(match.group('p')) if match.group('p') is not None else 1
    return KernelSpec('exponential', sigma=sigma, p=p)


@dataclass(frozen=True, eq=False)
class Kernel:
    """A normalized positive-definite kernel on (s, a) pairs.

    gaussian: exp(-|u - v|_2^2 / sigma^2); exponential: exp(-|u - v|_p / sigma);
    constant: 1. Distances are taken between normalized feature vectors.
    """

    spec: KernelSpec
    features: FeatureMap

    @property
    def kind(self) -> KernelKind:
        """Kernel family."""
        return self.spec.kind

    def between(self, u: FloatArray, v: FloatArray) -> FloatArray:
        """Kernel matrix between two sets of feature vectors."""
        if self.spec.kind == 'constant':
            return np.ones((u.shape[0], v.shape[0]))
        if self.spec.kind == 'gaussian':
            return np.exp(-cdist(u, v, 'sqeuclidean') / self.spec.sigma**2)
        return np.exp(-cdist(u, v, 'minkowski', p=self.spec.p) / self.spec.sigma)

    def gram(self) -> FloatArray:
        """Gram matrix over every (s, a) in flat order."""
        grid = self.features.grid()
        return self.between(grid, grid)


def kernel_eval(k: Kernel, u: tuple[int, int], v: tuple[int, int]) -> float:
    """kappa(u, v) for two (state, action) pairs."""
    table = k.features.normalized_table
    return float(k.between(table[u][None, :], table[v][None, :])[0, 0])


def _quadratic_form(gram: FloatArray, vector: FloatArray) -> float:
    value = float(vector @ gram @ vector)
    if value < -PSD_SLACK:
        msg = f'kernel quadratic form is negative: {value:.3e}'
        raise KernelNotPsdError(msg)
    return max(value, 0.0)


def dual_norm_exact(k: Kernel, g: FloatArray, mu: FloatArray) -> float:
    """Dual RKHS norm of g under mu: sqrt(g' diag(mu) K diag(mu) g).

    Raises:
        KernelNotPsdError: If the quadratic form is below -1e-10

    """
    weighted = np.ravel(mu) * np.ravel(g)
    return math.sqrt(_quadratic_form(k.gram(), weighted))


def dual_norm_maximizer(k: Kernel, g: FloatArray, mu: FloatArray) -> FloatArray:
    """Unit-RKHS-norm function f* = K diag(mu) g / ||K diag(mu) g||_F attaining the dual norm.

    Returns zeros when g has zero dual norm.
    """
    gram = k.gram()
    alpha = np.ravel(mu) * np.ravel(g)
    norm_squared = _quadratic_form(gram, alpha)
    if norm_squared == 0.0:
        return np.zeros_like(alpha)
    return (gram @ alpha) / math.sqrt(norm_squared)


def dual_norm_maximizer_check(k: Kernel, g: FloatArray, mu: FloatArray, trials: int, seed: int = 0) -> float:
    """Best E_mu[f g] over random functions f = K alpha scaled to unit RKHS norm.

    A sampled lower estimate of :func:`dual_norm_exact`, computed without the
    closed form.
    """
    gram = k.gram()
    weights = np.ravel(mu) * np.ravel(g)
    rng = make_rng(seed, 'dual_norm_check')
    best = 0.0
    for _ in range(trials):
        alpha = rng.standard_normal(gram.shape[0])
        norm_squared = float(alpha @ gram @ alpha)
        if norm_squared <= 0.0:
            continue
        value = abs(float(weights @ (gram @ alpha))) / math.sqrt(norm_squared)
        best = max(best, value)
    return best


def v_statistic(k: Kernel, cells: IntArray, residuals: FloatArray) -> float:
    """(1/n^2) sum_{i,j} kappa(u_i, u_j) e_i e_j, diagonal included.

    Residuals of records in the same (s, a) cell are summed first; the
    quadratic form then runs over the distinct visited cells in index order.
    """
    n = residuals.shape[0]
    n_cells = k.features.table.shape[0] * k.features.table.shape[1]
    sums = np.bincount(cells, weights=residuals, minlength=n_cells)
    visited = np.flatnonzero(np.bincount(cells, minlength=n_cells))
    grid = k.features.grid()[visited]
    block = k.between(grid, grid)
    totals = sums[visited]
    return float(totals @ block @ totals) / n**2


def kernel_bellman_loss(k: Kernel, x: BellmanOperator, f: QFunction, d: TransitionDataset, policy: Policy) -> float:
    """Kernel Bellman loss of x at f on d (the raw V-statistic, may be slightly negative)."""
    return v_statistic(k, d.cells, bellman_residuals(x, f, d, policy))


def rkhs_norm_surrogate(k: Kernel, w: FloatArray) -> float:
    """Norm of the minimum-norm RKHS interpolant of w: sqrt(w' K^+ w).

    Returns:
        The surrogate norm, or inf when w is not in the range of the Gram matrix

    """
    gram = k.gram()
    values = np.ravel(w)
    pseudo_inverse = scipy.linalg.pinvh(gram)
    projected = gram @ (pseudo_inverse @ values)
    if np.linalg.norm(projected - values) > RANGE_TOLERANCE * max(1.0, float(np.linalg.norm(values))):
        logger.debug('Weight function lies outside the range of the %s Gram matrix', k.spec.text)
        return math.inf
    return math.sqrt(max(float(values @ pseudo_inverse @ values), 0.0))
