"""Coordinate descent sparse coding"""
import json

import numpy as np
import pytest

from src.csc_solver import (
    CandidateUpdate, CodingContext, ConvergenceLog, SelectionStrategy, apply_update,
    best_candidate, cost_delta, default_tolerance, init_state, make_sub_partition,
    optimality_residual, solve,
)
from src.exceptions import EmptyRegionError
from src.synthetic import gaussian_dictionary
from src.tensor_core import (
    ActivationMap, Dictionary, Domain, Signal, SubDomain, lambda_max, objective,
)


def test_candidate_is_soft_thresholded_beta():
    D = Dictionary(np.ones((1, 1, 1)))
    ctx = CodingContext(D, 0.5)
    z = np.zeros((1, 8))
    beta = np.zeros((1, 8))
    beta[0, 3] = 2.0
    cand = ctx.candidate(z, beta, SubDomain((0,), (8,)), (0,))
    assert (cand.k, cand.position) == (0, (3,))
    assert cand.z_new == pytest.approx(1.5)
    assert cand.dz == pytest.approx(1.5)


def test_candidate_ties_go_to_smallest_position():
    D = Dictionary(np.ones((2, 1, 1)))
    ctx = CodingContext(D, 0.0)
    beta = np.zeros((2, 8))
    beta[0, 6] = beta[1, 2] = beta[0, 3] = 1.0
    cand = ctx.candidate(np.zeros((2, 8)), beta, SubDomain((0,), (8,)), (0,))
    assert (cand.k, cand.position) == (0, (3,))


def test_apply_updates_the_neighbourhood_only():
    D = Dictionary(np.array([1.0, 1.0]).reshape(1, 2, 1))
    ctx = CodingContext(D, 0.0)
    z = np.zeros((1, 10))
    beta = np.zeros((1, 10))
    touched = ctx.apply(z, beta, (0,), 0, (5,), 1.0, 1.0)
    assert touched == 3
    assert beta[0, 4] == -1.0 and beta[0, 6] == -1.0
    assert beta[0, 5] == 0.0
    assert z[0, 5] == 1.0
    assert not np.any(beta[0, [0, 1, 2, 3, 7, 8, 9]])


def test_beta_stays_consistent_after_many_updates(instance_1d, rng):
    X, D = instance_1d
    z_hat, beta = init_state(X, D)
    ctx = CodingContext(D, 0.0)
    for _ in range(1000):
        k = int(rng.randint(D.n_atoms))
        pos = (int(rng.randint(60)),)
        z_old = float(z_hat.values[(k,) + pos])
        apply_update(z_hat, beta, CandidateUpdate(k, pos, z_old, z_old + rng.randn()), D, ctx)
    _, fresh = init_state(X, D, ActivationMap(z_hat.values.copy()))
    assert np.max(np.abs(beta.values - fresh.values)) < 1e-8


def test_warm_start_beta_excludes_own_coordinate(instance_2d, rng):
    X, D = instance_2d
    z0 = ActivationMap(rng.randn(D.n_atoms, 16, 16))
    _, beta = init_state(X, D, z0)
    # removing Z_k[w] from the residual adds Z_k[w] ||D_k||^2 back
    k, pos = 1, (7, 9)
    z = z0.values.copy()
    z[(k,) + pos] = 0.0
    _, beta_removed = init_state(X, D, ActivationMap(z))
    assert beta.values[(k,) + pos] == pytest.approx(
        beta_removed.values[(k,) + pos], abs=1e-9)


def test_cost_delta_matches_objective_difference(instance_1d):
    X, D = instance_1d
    lmbd = 0.2 * lambda_max(X, D)
    z_hat, beta = init_state(X, D)
    update = best_candidate(SubDomain((0,), (60,)), z_hat, beta, D, lmbd)
    before = objective(X, z_hat, D, lmbd)
    predicted = cost_delta(update, z_hat, beta, D, lmbd)
    apply_update(z_hat, beta, update, D)
    assert predicted > 0
    assert predicted == pytest.approx(before - objective(X, z_hat, D, lmbd), rel=1e-10)


def test_best_candidate_rejects_empty_region(instance_1d):
    X, D = instance_1d
    z_hat, beta = init_state(X, D)
    with pytest.raises(EmptyRegionError):
        best_candidate(SubDomain((4,), (4,)), z_hat, beta, D, 0.1)
    with pytest.raises(EmptyRegionError):
        best_candidate(SubDomain((50,), (70,)), z_hat, beta, D, 0.1)


class TestSubPartition:

    def test_last_cell_absorbs_remainder(self):
        cells = make_sub_partition(SubDomain((0,), (20,)), (4,))
        assert cells == [SubDomain((0,), (8,)), SubDomain((8,), (20,))]

    def test_cells_cover_a_2d_region(self):
        region = SubDomain((10, 0), (42, 30))
        cells = make_sub_partition(region, (4, 5))
        assert len(cells) == 4 * 3
        assert sum(c.size for c in cells) == region.size
        assert cells[0].lo == (10, 0)

    def test_short_region_is_one_cell(self):
        assert make_sub_partition(SubDomain((0,), (5,)), (4,)) == [SubDomain((0,), (5,))]

    def test_empty_region(self):
        with pytest.raises(EmptyRegionError):
            make_sub_partition(SubDomain((3,), (3,)), (2,))


def test_default_tolerance():
    D = gaussian_dictionary(2, (4,), 1, 0)
    assert default_tolerance(D, 1.0) == pytest.approx(1e-2)
    assert default_tolerance(D, 0.0) == 1e-8


def test_single_atom_recovers_shrunk_amplitude():
    rng = np.random.RandomState(4)
    D = gaussian_dictionary(1, (4,), 1, rng)
    x = np.zeros((20, 1))
    x[7:11] = 2.0 * D.values[0]
    z_hat, log = solve(Signal(x), D, 0.5)
    assert log.converged
    assert z_hat.nnz() == 1
    assert z_hat.values[0, 7] == pytest.approx(1.5, abs=1e-12)


def test_large_lambda_gives_zero_code(instance_2d):
    X, D = instance_2d
    for strategy in SelectionStrategy:
        z_hat, log = solve(X, D, lambda_max(X, D), strategy, seed=0)
        assert z_hat.nnz() == 0
        assert log.converged
        assert log.n_updates == 0


def test_strategies_reach_the_same_objective():
    rng = np.random.RandomState(7)
    X = Signal(rng.randn(32, 1))
    D = gaussian_dictionary(2, (4,), 1, rng)
    lmbd = 0.1 * lambda_max(X, D)
    values = {}
    for strategy in SelectionStrategy:
        z_hat, log = solve(X, D, lmbd, strategy, tol=1e-8, seed=1)
        assert log.converged, strategy
        values[strategy] = objective(X, z_hat, D, lmbd)
    reference = values[SelectionStrategy.GREEDY]
    for value in values.values():
        assert abs(value - reference) / reference < 1e-6


def test_solution_satisfies_the_fixed_point(instance_2d):
    X, D = instance_2d
    lmbd = 0.1 * lambda_max(X, D)
    tol = 1e-6
    z_hat, log = solve(X, D, lmbd, tol=tol)
    _, beta = init_state(X, D, z_hat)
    assert optimality_residual(z_hat, beta, D, lmbd) < tol
    assert log.final_objective == pytest.approx(objective(X, z_hat, D, lmbd))


def test_greedy_scans_the_whole_domain(instance_1d):
    X, D = instance_1d
    _, log = solve(X, D, 0.3 * lambda_max(X, D), SelectionStrategy.GREEDY)
    assert log.n_scanned % (D.n_atoms * 60) == 0


def test_max_iter_stops_early(instance_1d):
    X, D = instance_1d
    _, log = solve(X, D, 0.01 * lambda_max(X, D), tol=1e-10, max_iter=5)
    assert not log.converged
    assert log.n_iter == 5


def test_zero_atom_is_frozen(rng):
    values = gaussian_dictionary(3, (4,), 1, rng).values
    values[1] = 0.0
    D = Dictionary(values)
    X = Signal(rng.randn(30, 1))
    z_hat, log = solve(X, D, 0.1 * lambda_max(X, D))
    assert log.frozen_atoms == [1]
    assert not np.any(z_hat.values[1])


def test_solve_validates_tolerance(instance_1d):
    X, D = instance_1d
    with pytest.raises(ValueError):
        solve(X, D, 0.1, tol=0.0)
    with pytest.raises(ValueError):
        CodingContext(D, -1.0)


def test_convergence_log(tmp_path, instance_1d):
    X, D = instance_1d
    _, log = solve(X, D, 0.2 * lambda_max(X, D), checkpoint_every=3)
    summary = log.summary()
    assert summary['strategy'] == 'lgcd'
    assert summary['converged']
    assert all('objective' in r for r in log.records)
    path = tmp_path / 'log.jsonl'
    log.save(path)
    lines = path.read_text(encoding='utf-8').strip().splitlines()
    assert len(lines) == len(log.records)
    assert json.loads(lines[-1])['iter'] == log.n_iter


def test_convergence_log_defaults():
    log = ConvergenceLog('greedy')
    assert log.runtime == 0.0
    assert log.final_objective is None
    log.add(3, 0.5, 0.1, obj=2.0)
    log.add(4, 0.7, 0.05)
    assert log.final_objective == 2.0
    assert log.runtime == 0.7


def test_domain_helper_consistency():
    assert SubDomain.from_domain(Domain((3, 4))) == SubDomain((0, 0), (3, 4))
