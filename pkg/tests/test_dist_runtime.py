"""Distributed coordinate descent: workers, transports and termination"""
import numpy as np
import pytest
from numpy.testing import assert_array_equal

from src.csc_solver import CodingContext, SelectionStrategy, default_tolerance, solve
from src.dist_runtime import (
    ControlKind, QueueTransport, RunStats, RuntimeOptions, ThreadedTransport, WorkerStatus,
    _confirm_termination, _init_workers, _run_deterministic, audit_commits, check_halo_coherence,
    convergence_consensus, divergence_guard, divergence_threshold, run_dicodile_z,
    worker_iteration,
)
from src.exceptions import ConfigError, DivergenceError, ProtocolError, ShapeError, TransportError
from src.grid_protocol import UpdateMessage, make_grid
from src.synthetic import generate_corner_image, generate_synthetic, get_preset
from src.tensor_core import Domain, Signal, lambda_max, objective


def _dirac_workers(x, D, lmbd=0.1, n_workers=2):
    """Workers over a 64-sample signal coded with the dirac atom"""
    X = Signal(np.asarray(x, dtype=float)[:, None])
    grid = make_grid(X.domain, n_workers, D.support.sizes)
    ctx = CodingContext(D, lmbd)
    states = _init_workers(X, D, grid, ctx, 1e-6, RuntimeOptions(), None)
    return states, QueueTransport(grid.n_workers), grid


class TestWorkerIteration:

    def test_interior_update_sends_nothing(self, dirac_atom):
        x = np.zeros(64)
        x[12] = 3.0
        states, transport, _ = _dirac_workers(x, dirac_atom)
        states[0].cell = 1
        assert worker_iteration(states[0], transport) == 'updated'
        assert states[0].z[0, 12] == pytest.approx(2.9)
        assert transport.get_stats()['updates_sent'] == 0
        assert states[0].stats['emitting_iterations'] == 0

    def test_border_update_notifies_the_neighbor(self, dirac_atom):
        x = np.zeros(64)
        x[30] = 5.0
        states, transport, _ = _dirac_workers(x, dirac_atom)
        states[0].cell = 3
        assert worker_iteration(states[0], transport) == 'updated'
        assert transport.get_stats()['updates_sent'] == 1
        transport.deliver()
        worker_iteration(states[1], transport)
        # the mirrored coordinate sits at 30 - 28 in worker 1's slab
        assert states[1].z[0, 2] == states[0].z[0, 30]
        assert states[1].stats['messages_received'] == 1

    def test_soft_locked_candidate_is_not_applied(self, dirac_atom):
        x = np.zeros(64)
        x[30], x[33] = 1.0, 5.0
        states, transport, _ = _dirac_workers(x, dirac_atom)
        states[0].cell = 3
        assert worker_iteration(states[0], transport) == 'soft_locked'
        assert not np.any(states[0].z)
        assert states[0].stats['soft_locked'] == 1
        assert states[0].cell == 0

    def test_soft_lock_disabled(self, dirac_atom):
        x = np.zeros(64)
        x[30], x[33] = 1.0, 5.0
        states, transport, _ = _dirac_workers(x, dirac_atom)
        states[0].options = RuntimeOptions(soft_lock=False)
        states[0].cell = 3
        assert worker_iteration(states[0], transport) == 'updated'

    def test_update_outside_the_halo_is_a_protocol_error(self, dirac_atom):
        states, transport, _ = _dirac_workers(np.zeros(64), dirac_atom)
        transport.send(1, 0, UpdateMessage(0, (50,), 1.0, 1.0, origin=1, seq=1))
        transport.deliver()
        with pytest.raises(ProtocolError):
            worker_iteration(states[0], transport)

    def test_update_for_an_owned_position_is_a_protocol_error(self, dirac_atom):
        states, transport, _ = _dirac_workers(np.zeros(64), dirac_atom)
        transport.send(1, 0, UpdateMessage(0, (10,), 1.0, 1.0, origin=1, seq=1))
        transport.deliver()
        with pytest.raises(ProtocolError):
            worker_iteration(states[0], transport)

    def test_paused_worker_wakes_up_on_border_update(self, dirac_atom):
        states, transport, _ = _dirac_workers(np.zeros(64), dirac_atom)
        state = states[0]
        state.status = WorkerStatus.PAUSED
        state.handle(UpdateMessage(0, (33,), 1.0, 1.0, origin=1, seq=1), transport)
        assert state.status == WorkerStatus.ACTIVE
        assert state.epoch == 1
        assert state.z[0, 33] == 1.0

    def test_quiet_worker_pauses(self, dirac_atom):
        states, transport, _ = _dirac_workers(np.zeros(64), dirac_atom)
        state = states[0]
        for _ in range(state.n_cells):
            worker_iteration(state, transport)
        assert state.status == WorkerStatus.PAUSED


class TestConsensus:

    def test_all_paused(self, dirac_atom):
        states, _, _ = _dirac_workers(np.zeros(64), dirac_atom)
        for state in states:
            state.status = WorkerStatus.PAUSED
        assert convergence_consensus(states) == ControlKind.GLOBAL_DONE
        assert convergence_consensus(states, pending_updates=1) is None

    def test_one_active(self, dirac_atom):
        states, _, _ = _dirac_workers(np.zeros(64), dirac_atom)
        states[0].status = WorkerStatus.PAUSED
        assert convergence_consensus(states) is None

    def test_token_terminates_a_quiet_grid(self, dirac_atom):
        states, transport, _ = _dirac_workers(np.zeros(64), dirac_atom, n_workers=4)
        rounds, terminated = _run_deterministic(states, transport, RuntimeOptions(seed=0), None)
        assert terminated
        assert all(s.status == WorkerStatus.DONE for s in states)

    def test_token_conclusion_is_cross_checked(self, dirac_atom):
        states, transport, _ = _dirac_workers(np.zeros(64), dirac_atom)
        for state in states:
            state.status = WorkerStatus.DONE
        assert _confirm_termination(states, transport)
        transport.send(0, 1, UpdateMessage(0, (30,), 1.0, 1.0, origin=0, seq=1))
        assert not _confirm_termination(states, transport)
        states[1].abort_reason = 'divergence on worker 1'
        assert _confirm_termination(states, transport)


class TestDivergenceGuard:

    def test_zero_code_is_fine(self, dirac_atom):
        states, _, _ = _dirac_workers(np.zeros(64), dirac_atom)
        assert not divergence_guard(states[0])

    def test_large_code_trips(self, dirac_atom):
        states, _, _ = _dirac_workers(np.zeros(64), dirac_atom)
        states[0].z[0, 5] = 60.0
        assert divergence_guard(states[0])
        assert not divergence_guard(states[0], threshold_factor=100.0)

    def test_threshold(self, dirac_atom):
        assert divergence_threshold(dirac_atom) == pytest.approx(50.0)
        assert divergence_threshold(dirac_atom, 2.0) == pytest.approx(2.0)


def test_single_worker_matches_the_sequential_solver(sparse_1d):
    X, D, _ = sparse_1d
    lmbd = 0.1 * lambda_max(X, D)
    grid = make_grid(X.domain, 1, D.support.sizes)
    z_dist, stats = run_dicodile_z(X, D, lmbd, grid, 1e-6)
    z_seq, log = solve(X, D, lmbd, SelectionStrategy.LOCALLY_GREEDY, tol=1e-6)
    assert_array_equal(z_dist.values, z_seq.values)
    assert stats.converged and log.converged
    assert stats.messages == 0
    assert stats.accepted == log.n_updates


@pytest.mark.parametrize("n_workers", [2, 4])
def test_workers_reach_the_sequential_objective(sparse_1d, n_workers):
    X, D, _ = sparse_1d
    lmbd = 0.1 * lambda_max(X, D)
    tol = 1e-9
    z_seq, _ = solve(X, D, lmbd, tol=tol)
    reference = objective(X, z_seq, D, lmbd)
    grid = make_grid(X.domain, n_workers, D.support.sizes)
    z_dist, stats = run_dicodile_z(X, D, lmbd, grid, tol, RuntimeOptions(seed=n_workers))
    assert stats.converged
    assert abs(stats.objective - reference) / reference < 1e-6
    assert stats.objective == pytest.approx(objective(X, z_dist, D, lmbd))
    for a, b in stats.links:
        assert b in grid.neighbors(a)
    assert stats.message_fraction < 0.5


def test_large_lambda_gives_zero_code_and_no_messages(sparse_1d):
    X, D, _ = sparse_1d
    grid = make_grid(X.domain, 4, D.support.sizes)
    z_hat, stats = run_dicodile_z(X, D, lambda_max(X, D), grid)
    assert z_hat.nnz() == 0
    assert stats.messages == 0
    assert stats.converged


def test_halo_coherence_after_drain():
    spec = get_preset('2d-tiny', sizes=(48, 48), support=(4, 4), n_atoms=2, rho=0.02, seed=5)
    X, D, _ = generate_synthetic(spec)
    grid = make_grid(X.domain, 9, D.support.sizes)
    ctx = CodingContext(D, 0.1 * lambda_max(X, D))
    options = RuntimeOptions(seed=2)
    states = _init_workers(X, D, grid, ctx, 1e-4, options, None)
    transport = QueueTransport(grid.n_workers)
    _, terminated = _run_deterministic(states, transport, options, None)
    assert terminated
    assert transport.pending_updates() == 0
    assert check_halo_coherence(states, grid) == 0.0


def _audit_random_phase_run(seed):
    spec = get_preset('2d-tiny', sizes=(64, 64), support=(4, 4), n_atoms=3, rho=0.05, seed=seed)
    X, D, _ = generate_synthetic(spec)
    grid = make_grid(X.domain, 16, D.support.sizes)
    options = RuntimeOptions(seed=seed, record_commits=True, random_phase=True)
    _, stats = run_dicodile_z(X, D, 0.05 * lambda_max(X, D), grid, options=options)
    assert stats.commits
    return audit_commits(stats.commits, D.support.sizes)


@pytest.mark.parametrize("seed", range(5))
def test_soft_locks_prevent_interfering_commits(seed):
    assert _audit_random_phase_run(seed) == []


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(5, 100))
def test_commit_audit_over_many_seeds(seed):
    assert _audit_random_phase_run(seed) == []


@pytest.mark.slow
@pytest.mark.parametrize("n_workers", [4, 9])
def test_grid_matches_one_worker_on_2d_tiny(n_workers):
    X, D, _ = generate_synthetic(get_preset('2d-tiny', seed=0))
    lmbd = 0.1 * lambda_max(X, D)
    tol = 0.1 * default_tolerance(D, lmbd)
    _, single = run_dicodile_z(X, D, lmbd, make_grid(X.domain, 1, D.support.sizes), tol)
    grid = make_grid(X.domain, n_workers, D.support.sizes)
    _, stats = run_dicodile_z(X, D, lmbd, grid, tol, RuntimeOptions(seed=n_workers))
    assert single.converged and stats.converged
    assert abs(stats.objective - single.objective) / single.objective <= 1e-6


def _corner_run(seed, soft_lock):
    """True when the divergence guard stops a 49 worker run on the corner image"""
    grid = make_grid(Domain((128, 128)), 49, (8, 8))
    X, D = generate_corner_image(grid, seed=seed)
    assert make_grid(X.domain, 49, (8, 8)) == grid
    lmbd = 0.1 * lambda_max(X, D)
    try:
        run_dicodile_z(X, D, lmbd, grid, options=RuntimeOptions(seed=seed, soft_lock=soft_lock))
    except DivergenceError:
        return True
    return False


def test_corner_image_diverges_without_soft_locks():
    assert _corner_run(0, soft_lock=False)
    assert not _corner_run(0, soft_lock=True)


@pytest.mark.slow
def test_divergence_rate_with_and_without_soft_locks():
    seeds = range(10)
    unlocked = np.mean([_corner_run(s, soft_lock=False) for s in seeds])
    locked = np.mean([_corner_run(s, soft_lock=True) for s in seeds])
    assert unlocked >= 0.8
    assert locked == 0.0


def test_divergence_aborts_every_worker(sparse_1d):
    X, D, _ = sparse_1d
    grid = make_grid(X.domain, 4, D.support.sizes)
    options = RuntimeOptions(seed=0, divergence_factor=1e-6)
    with pytest.raises(DivergenceError) as excinfo:
        run_dicodile_z(X, D, 0.1 * lambda_max(X, D), grid, options=options)
    error = excinfo.value
    assert error.workers
    assert error.z_hat is not None
    assert error.stats.aborted
    assert not error.stats.converged
    assert all(w['status'] in ('done', 'diverged') for w in error.stats.per_worker)


def test_iteration_budget_reports_non_convergence(sparse_1d):
    X, D, _ = sparse_1d
    grid = make_grid(X.domain, 2, D.support.sizes)
    _, stats = run_dicodile_z(X, D, 0.01 * lambda_max(X, D), grid, 1e-12,
                              RuntimeOptions(max_iter=3))
    assert not stats.converged
    assert any(w['exhausted'] for w in stats.per_worker)


def test_async_backend(sparse_1d):
    X, D, _ = sparse_1d
    lmbd = 0.1 * lambda_max(X, D)
    z_seq, _ = solve(X, D, lmbd, tol=1e-9)
    reference = objective(X, z_seq, D, lmbd)
    grid = make_grid(X.domain, 2, D.support.sizes)
    _, stats = run_dicodile_z(X, D, lmbd, grid, 1e-9, RuntimeOptions(scheduler='async', timeout=120))
    assert stats.converged
    assert stats.scheduler == 'async'
    assert abs(stats.objective - reference) / reference < 1e-6


def test_run_validates_inputs(sparse_1d):
    X, D, _ = sparse_1d
    with pytest.raises(ShapeError):
        run_dicodile_z(X, D, 0.1, make_grid(Domain((256,)), 1, D.support.sizes))
    with pytest.raises(ConfigError):
        run_dicodile_z(X, D, 0.1, make_grid(X.domain, 1, D.support.sizes),
                       options=RuntimeOptions(scheduler='mpi'))
    with pytest.raises(ConfigError):
        RuntimeOptions(activity=0.0).validate()


class TestTransports:

    def test_queue_transport_is_fifo_per_pair(self):
        transport = QueueTransport(3)
        for seq in range(3):
            transport.send(0, 2, UpdateMessage(0, (seq,), 1.0, 1.0, 0, seq))
        transport.send(1, 2, UpdateMessage(0, (9,), 1.0, 1.0, 1, 0))
        assert transport.pending_updates() == 4
        transport.deliver(np.random.RandomState(0))
        received = transport.receive_all(2)
        from_zero = [m.seq for m in received if m.origin == 0]
        assert from_zero == [0, 1, 2]
        assert transport.pending_updates() == 0
        assert transport.links == {(0, 2), (1, 2)}

    def test_unknown_destination(self):
        with pytest.raises(TransportError):
            QueueTransport(2).send(0, 5, UpdateMessage(0, (0,), 1.0, 1.0, 0, 0))

    def test_threaded_transport_counts_in_flight(self):
        transport = ThreadedTransport(2)
        transport.send(0, 1, UpdateMessage(0, (0,), 1.0, 1.0, 0, 0))
        assert transport.pending_updates() == 1
        transport.wait(1, 0.1)
        assert len(transport.receive_all(1)) == 1
        assert transport.pending_updates() == 0
        transport.close()
        with pytest.raises(TransportError):
            transport.send(0, 1, UpdateMessage(0, (0,), 1.0, 1.0, 0, 1))


def test_run_stats_serialization():
    stats = RunStats(workers=4, grid=[2, 2], accepted=30, soft_locked=10, messages=5,
                     t_sec=0.5, wall_sec=0.6, objective=1.0, converged=True,
                     scheduler='deterministic', iterations=40, emitting_iterations=4)
    assert stats.acceptance_rate == pytest.approx(0.75)
    assert stats.message_fraction == pytest.approx(0.1)
    data = stats.to_dict()
    for key in ('workers', 'grid', 'accepted', 'soft_locked', 'messages', 't_sec', 'objective'):
        assert key in data
    assert '"workers": 4' in stats.to_json()
