"""Tests for the MetaFQE drivers and the four selection methods."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fqe_selection.datasets import TransitionDataset, index_features, sample_dataset
from fqe_selection.environments import garnet
from fqe_selection.exceptions import InvalidArgumentError, InvalidHorizonError
from fqe_selection.kernels import Kernel, parse_kernel_spec
from fqe_selection.mdp import HorizonSpec, Policy, TabularMdp, bellman_backup, exact_q
from fqe_selection.operators import CandidateSet, ExactBellmanOperator, IdentityOperator, ShiftedOperator
from fqe_selection.selection import (
    FixedPointConfig,
    bellman_regret,
    fourth_root_ceil,
    meta_fqe,
    meta_fqe_fp,
    run_candidates,
    run_method,
    select_klm,
    select_klm_fp,
    select_rm,
    select_rm_fp,
    tied_argmin,
    total_kernel_loss,
    total_regret,
)


@pytest.fixture
def valid_data(small_garnet: TabularMdp, uniform_mu: np.ndarray) -> TransitionDataset:
    """Validation records drawn uniformly over the garnet."""
    return sample_dataset(small_garnet, uniform_mu, 2000, seed=1)


@pytest.fixture
def kernel() -> Kernel:
    """Exponential kernel on raw index features."""
    return parse_kernel_spec('exp:p=1:sigma=1').bind(index_features(4, 2))


def _exact_and_shifted(mdp: TabularMdp, policy: Policy, horizon: HorizonSpec) -> CandidateSet:
    exact = ExactBellmanOperator(mdp, policy, horizon, 'exact')
    return CandidateSet((ShiftedOperator(exact, 0.5, 'shifted'), exact))


def test_fourth_root_ceil() -> None:
    """Test exact integer fourth roots rounded up."""
    assert [fourth_root_ceil(n) for n in (0, 1, 16, 17, 81, 82, 10000)] == [1, 1, 2, 3, 3, 4, 10]
    assert FixedPointConfig.for_sample_size(100).h_star == 4


def test_fixed_point_config_validates() -> None:
    """Test that the budget and tolerance are checked."""
    with pytest.raises(InvalidArgumentError):
        FixedPointConfig(0)
    with pytest.raises(InvalidArgumentError):
        FixedPointConfig(3, fp_tolerance=-1.0)


def test_meta_fqe_with_exact_operator_reproduces_q_pi(
    small_garnet: TabularMdp, garnet_policy: Policy, finite_horizon: HorizonSpec
) -> None:
    """Test that iterating B_pi from zero gives the h-step Q-functions."""
    seq = meta_fqe(ExactBellmanOperator(small_garnet, garnet_policy, finite_horizon), finite_horizon)

    assert len(seq.iterates) == 4
    np.testing.assert_array_equal(seq.iterates[0], 0.0)
    np.testing.assert_allclose(seq.iterates[2], exact_q(small_garnet, garnet_policy, HorizonSpec(2, 1.0)))
    np.testing.assert_allclose(seq.terminal, exact_q(small_garnet, garnet_policy, finite_horizon))
    assert not seq.fixed_point_mode


def test_meta_fqe_needs_finite_horizon(small_garnet: TabularMdp, garnet_policy: Policy) -> None:
    """Test that an infinite horizon is refused."""
    horizon = HorizonSpec(None, 0.9)

    with pytest.raises(InvalidHorizonError):
        meta_fqe(ExactBellmanOperator(small_garnet, garnet_policy, horizon), horizon)


def test_meta_fqe_fp_needs_discount(
    small_garnet: TabularMdp, garnet_policy: Policy, finite_horizon: HorizonSpec
) -> None:
    """Test that gamma = 1 is refused by the fixed-point driver."""
    with pytest.raises(InvalidHorizonError):
        meta_fqe_fp(ExactBellmanOperator(small_garnet, garnet_policy, finite_horizon), FixedPointConfig(5))


def test_meta_fqe_fp_exits_at_fixed_point() -> None:
    """Test that an operator fixing zero exits at the first step with that iterate."""
    seq = meta_fqe_fp(IdentityOperator(HorizonSpec(None, 0.9), (4, 2)), FixedPointConfig(10))

    assert seq.fp_exit_step == 1
    assert seq.averages == ()
    assert seq.fixed_point_mode
    np.testing.assert_array_equal(seq.terminal, 0.0)


def test_meta_fqe_fp_averages_iterates(small_garnet: TabularMdp, garnet_policy: Policy) -> None:
    """Test that the terminal is the running mean of Q_1..Q_H*."""
    x = ExactBellmanOperator(small_garnet, garnet_policy, HorizonSpec(None, 0.8))
    seq = meta_fqe_fp(x, FixedPointConfig(6))

    assert seq.fp_exit_step is None
    assert len(seq.averages) == 6
    np.testing.assert_allclose(seq.averages[2], np.mean(seq.iterates[1:4], axis=0))
    np.testing.assert_allclose(seq.terminal, np.mean(seq.iterates[1:], axis=0))


def test_run_candidates_needs_exactly_one_mode(
    small_garnet: TabularMdp, garnet_policy: Policy, finite_horizon: HorizonSpec
) -> None:
    """Test that passing both or neither of horizon and cfg fails."""
    cset = _exact_and_shifted(small_garnet, garnet_policy, finite_horizon)

    with pytest.raises(InvalidArgumentError):
        run_candidates(cset)
    with pytest.raises(InvalidArgumentError):
        run_candidates(cset, horizon=finite_horizon, cfg=FixedPointConfig(3))


def test_rm_prefers_exact_operator(
    small_garnet: TabularMdp, garnet_policy: Policy, finite_horizon: HorizonSpec, valid_data: TransitionDataset
) -> None:
    """Test that RM gives the exact operator zero regret and selects it over a shifted copy."""
    cset = _exact_and_shifted(small_garnet, garnet_policy, finite_horizon)
    report = select_rm(cset, finite_horizon, valid_data, garnet_policy)

    assert report.selected_id == 'exact'
    assert report.selected_index == 1
    assert report.per_candidate_scores[1] == 0.0
    assert report.per_candidate_scores[0] > 0.0
    assert report.candidate_ids == ['shifted', 'exact']
    np.testing.assert_allclose(report.selected_q, exact_q(small_garnet, garnet_policy, finite_horizon))


def test_rm_scores_match_total_regret(
    small_garnet: TabularMdp, garnet_policy: Policy, finite_horizon: HorizonSpec, valid_data: TransitionDataset
) -> None:
    """Test that the batched RM scores equal the per-candidate total regret."""
    cset = _exact_and_shifted(small_garnet, garnet_policy, finite_horizon)
    runs = run_candidates(cset, horizon=finite_horizon)
    report = select_rm(cset, finite_horizon, valid_data, garnet_policy, runs=runs)

    for index, x in enumerate(cset):
        expected = total_regret(x, cset, runs[x.id], finite_horizon, valid_data, garnet_policy)
        assert report.per_candidate_scores[index] == pytest.approx(expected)


def test_bellman_regret_needs_member(
    small_garnet: TabularMdp, garnet_policy: Policy, finite_horizon: HorizonSpec, valid_data: TransitionDataset
) -> None:
    """Test that regret is only defined for members of the candidate set."""
    cset = _exact_and_shifted(small_garnet, garnet_policy, finite_horizon)
    outsider = ExactBellmanOperator(small_garnet, garnet_policy, finite_horizon, 'outsider')

    with pytest.raises(InvalidArgumentError):
        bellman_regret(outsider, cset, np.zeros((4, 2)), valid_data, garnet_policy)


def test_ties_break_to_lowest_index(
    small_garnet: TabularMdp, garnet_policy: Policy, finite_horizon: HorizonSpec, valid_data: TransitionDataset
) -> None:
    """Test that identical candidates resolve to the first one."""
    cset = CandidateSet(
        (
            ExactBellmanOperator(small_garnet, garnet_policy, finite_horizon, 'first'),
            ExactBellmanOperator(small_garnet, garnet_policy, finite_horizon, 'second'),
        )
    )

    assert select_rm(cset, finite_horizon, valid_data, garnet_policy).selected_id == 'first'


def test_scores_equal_up_to_rounding_resolve_to_lowest_index() -> None:
    """Test that scores differing only by float noise count as a tie."""
    assert 0.1 + 0.2 != 0.3
    assert tied_argmin([0.1 + 0.2, 0.3]) == 0
    assert tied_argmin([0.5, 0.3, 0.3 + 1e-13]) == 1
    assert tied_argmin([0.5, 0.3 + 1e-9, 0.3]) == 2
    assert tied_argmin([math.inf, 2.0]) == 1


@given(st.lists(st.integers(0, 1000), min_size=1, max_size=8), st.integers(-10, 10))
def test_selection_is_invariant_to_positive_score_scaling(scores: list[int], exponent: int) -> None:
    """Test that multiplying every score by a positive constant keeps the selected index."""
    factor = 2.0**exponent

    assert tied_argmin([factor * score for score in scores]) == tied_argmin([float(score) for score in scores])
    assert tied_argmin([float(score) for score in scores]) == scores.index(min(scores))


def test_klm_prefers_exact_operator(
    small_garnet: TabularMdp,
    garnet_policy: Policy,
    finite_horizon: HorizonSpec,
    valid_data: TransitionDataset,
    kernel: Kernel,
) -> None:
    """Test that the kernel loss ranks the exact operator first and records the kernel."""
    cset = _exact_and_shifted(small_garnet, garnet_policy, finite_horizon)
    runs = run_candidates(cset, horizon=finite_horizon)
    report = select_klm(cset, kernel, finite_horizon, valid_data, garnet_policy, runs=runs)

    assert report.selected_id == 'exact'
    assert report.kernel == 'exp:p=1:sigma=1'
    expected = total_kernel_loss(cset[0], kernel, runs['shifted'], finite_horizon, valid_data, garnet_policy)
    assert report.per_candidate_scores[0] == pytest.approx(expected)


def test_fixed_point_methods_prefer_exact_operator(
    small_garnet: TabularMdp, garnet_policy: Policy, valid_data: TransitionDataset, kernel: Kernel
) -> None:
    """Test RM-FP and KLM-FP on a discounted problem."""
    horizon = HorizonSpec(None, 0.8)
    cset = _exact_and_shifted(small_garnet, garnet_policy, horizon)
    cfg = FixedPointConfig(40)

    rm_fp = select_rm_fp(cset, cfg, valid_data, garnet_policy)
    klm_fp = select_klm_fp(cset, kernel, cfg, valid_data, garnet_policy)

    assert rm_fp.selected_id == 'exact'
    assert min(rm_fp.per_candidate_scores) == 0.0
    assert klm_fp.selected_id == 'exact'
    assert all(score >= 0.0 for score in klm_fp.per_candidate_scores)


def test_fixed_point_methods_need_discount(
    small_garnet: TabularMdp, garnet_policy: Policy, finite_horizon: HorizonSpec, valid_data: TransitionDataset
) -> None:
    """Test that RM-FP rejects undiscounted candidates."""
    cset = _exact_and_shifted(small_garnet, garnet_policy, finite_horizon)

    with pytest.raises(InvalidHorizonError):
        select_rm_fp(cset, FixedPointConfig(3), valid_data, garnet_policy)


def test_run_method_dispatch_and_validation(
    small_garnet: TabularMdp,
    garnet_policy: Policy,
    finite_horizon: HorizonSpec,
    valid_data: TransitionDataset,
    kernel: Kernel,
) -> None:
    """Test that run_method routes by name and checks its inputs."""
    cset = _exact_and_shifted(small_garnet, garnet_policy, finite_horizon)

    assert run_method('RM', cset, valid_data, garnet_policy, horizon=finite_horizon).method == 'RM'
    assert run_method('KLM', cset, valid_data, garnet_policy, horizon=finite_horizon, k=kernel).method == 'KLM'
    with pytest.raises(InvalidArgumentError):
        run_method('RM', cset, valid_data, garnet_policy)
    with pytest.raises(InvalidArgumentError):
        run_method('KLM', cset, valid_data, garnet_policy, horizon=finite_horizon)
    with pytest.raises(InvalidArgumentError):
        run_method('RM-FP', cset, valid_data, garnet_policy, horizon=finite_horizon)


def test_reused_runs_and_workers_do_not_change_reports(
    small_garnet: TabularMdp, garnet_policy: Policy, finite_horizon: HorizonSpec, valid_data: TransitionDataset
) -> None:
    """Test that precomputed runs and thread pools give identical scores."""
    cset = _exact_and_shifted(small_garnet, garnet_policy, finite_horizon)
    baseline = select_rm(cset, finite_horizon, valid_data, garnet_policy)
    runs = run_candidates(cset, horizon=finite_horizon, workers=2)

    reused = select_rm(cset, finite_horizon, valid_data, garnet_policy, runs=runs)
    threaded = select_rm(cset, finite_horizon, valid_data, garnet_policy, workers=4)

    assert reused.per_candidate_scores == baseline.per_candidate_scores
    assert threaded.per_candidate_scores == baseline.per_candidate_scores


@pytest.mark.slow
def test_averaged_iterate_is_near_fixed_point_for_every_budget() -> None:
    """Test that the averaged exact iterate has Bellman residual at most 2C / H* for H* = 1..64."""
    mdp = garnet(6, 2, branching=3, seed=0)
    policy = Policy(np.full(mdp.shape, 0.5))
    horizon = HorizonSpec(None, 0.9)
    exact = ExactBellmanOperator(mdp, policy, horizon, 'exact')

    for h_star in range(1, 65):
        average = meta_fqe_fp(exact, FixedPointConfig(h_star, fp_tolerance=0.0)).terminal
        residual = float(np.max(np.abs(average - bellman_backup(mdp, policy, average, horizon.gamma))))
        assert residual <= 2.0 * horizon.time_constant / h_star + 1e-12
