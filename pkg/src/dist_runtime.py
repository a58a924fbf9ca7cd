"""
Distributed coordinate descent runtime

W workers each own one sub-domain of the worker grid and run locally greedy
coordinate descent on it. Border updates are guarded by soft-locks and sent
to the neighbors that mirror the touched region. Termination is detected
without a coordinator: a token travels along a snake path over the grid and
back, collecting message balances and pause epochs.

Two backends share the worker code:
    deterministic   single-threaded, round-synchronous, seeded interleaving
    async           one thread per worker over thread-safe queues
"""
import json
import logging
import queue
import threading
import time
from abc import ABC, abstractmethod
from collections import deque
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.utils import check_random_state

from .csc_solver import CodingContext, default_tolerance, init_state, make_sub_partition
from .exceptions import ConfigError, DivergenceError, ProtocolError, ShapeError, TransportError
from .grid_protocol import (
    UpdateMessage, WorkerGrid, border_geometry, notify_set, soft_lock_check, token_path,
)
from .tensor_core import (
    ActivationMap, Dictionary, Signal, check_signal_shapes, correlate_array,
    lp_norm, neighborhood, objective,
)

logger = logging.getLogger(__name__)


class ControlKind(str, Enum):
    PAUSE_ANNOUNCE = 'pause_announce'  # token, forward pass
    WAKE_PROBE = 'wake_probe'          # token, return pass
    GLOBAL_DONE = 'global_done'
    ABORT = 'abort'


@dataclass(frozen=True)
class ControlMessage:
    kind: ControlKind
    sender: int
    epoch: int = 0
    balance: int = 0
    dirty: bool = False
    reason: str = ''


Message = Union[UpdateMessage, ControlMessage]


class WorkerStatus(str, Enum):
    ACTIVE = 'active'
    PAUSED = 'paused'
    DONE = 'done'
    DIVERGED = 'diverged'


class Transport(ABC):
    """Reliable point-to-point fabric with per-pair FIFO delivery"""

    def __init__(self, n_workers: int):
        self.n_workers = n_workers
        self.lock = threading.Lock()
        self.closed = False
        self.links = set()
        self.stats = {
            'updates_sent': 0,
            'control_sent': 0,
            'delivered': 0,
        }

    def _record_send(self, src: int, dst: int, message: Message):
        if not 0 <= dst < self.n_workers:
            raise TransportError(f"Unknown destination worker {dst}")
        with self.lock:
            if isinstance(message, UpdateMessage):
                self.stats['updates_sent'] += 1
                self.links.add((src, dst))
            else:
                self.stats['control_sent'] += 1

    @abstractmethod
    def send(self, src: int, dst: int, message: Message):
        pass

    @abstractmethod
    def receive_all(self, dst: int) -> List[Message]:
        pass

    @abstractmethod
    def pending_updates(self) -> int:
        """Update messages sent but not yet handed to their receiver"""

    def wait(self, dst: int, timeout: float):
        """Block until a message may be available for dst"""

    def close(self):
        self.closed = True

    def get_stats(self) -> Dict[str, int]:
        with self.lock:
            return dict(self.stats)


class QueueTransport(Transport):
    """Deterministic fabric: messages sit in per-pair channels until deliver()"""

    def __init__(self, n_workers: int):
        super().__init__(n_workers)
        self.channels: Dict[Tuple[int, int], deque] = {}
        self.inboxes: List[List[Message]] = [[] for _ in range(n_workers)]

    def send(self, src: int, dst: int, message: Message):
        if self.closed:
            raise TransportError("Transport is closed")
        self._record_send(src, dst, message)
        self.channels.setdefault((src, dst), deque()).append(message)

    def deliver(self, rng=None) -> int:
        """Move every in-flight message to its inbox; channel order is seeded"""
        keys = sorted(k for k, ch in self.channels.items() if ch)
        if rng is not None and len(keys) > 1:
            keys = [keys[i] for i in rng.permutation(len(keys))]
        n = 0
        for key in keys:
            channel = self.channels[key]
            while channel:
                self.inboxes[key[1]].append(channel.popleft())
                n += 1
        self.stats['delivered'] += n
        return n

    def receive_all(self, dst: int) -> List[Message]:
        messages, self.inboxes[dst] = self.inboxes[dst], []
        return messages

    def pending_updates(self) -> int:
        n = sum(isinstance(m, UpdateMessage) for ch in self.channels.values() for m in ch)
        return n + sum(isinstance(m, UpdateMessage) for box in self.inboxes for m in box)


class ThreadedTransport(Transport):
    """One thread-safe FIFO queue per receiver"""

    def __init__(self, n_workers: int):
        super().__init__(n_workers)
        self.queues = [queue.Queue() for _ in range(n_workers)]
        # messages pulled by wait(), only touched by the receiving thread
        self._held: List[List[Message]] = [[] for _ in range(n_workers)]
        self._in_flight_updates = 0

    def send(self, src: int, dst: int, message: Message):
        if self.closed:
            raise TransportError("Transport is closed")
        self._record_send(src, dst, message)
        if isinstance(message, UpdateMessage):
            with self.lock:
                self._in_flight_updates += 1
        self.queues[dst].put(message)

    def _taken(self, messages: List[Message]):
        n_updates = sum(isinstance(m, UpdateMessage) for m in messages)
        with self.lock:
            self.stats['delivered'] += len(messages)
            self._in_flight_updates -= n_updates

    def receive_all(self, dst: int) -> List[Message]:
        messages, self._held[dst] = self._held[dst], []
        q = self.queues[dst]
        while True:
            try:
                messages.append(q.get_nowait())
            except queue.Empty:
                break
        self._taken(messages)
        return messages

    def wait(self, dst: int, timeout: float):
        try:
            self._held[dst].append(self.queues[dst].get(timeout=timeout))
        except queue.Empty:
            pass

    def pending_updates(self) -> int:
        with self.lock:
            return self._in_flight_updates


@dataclass
class RuntimeOptions:
    """Execution options of a distributed coding run"""
    scheduler: str = 'deterministic'
    seed: Optional[int] = None
    soft_lock: bool = True
    divergence_factor: float = 50.0
    max_iter: int = 1_000_000           # per worker
    max_rounds: Optional[int] = None    # deterministic scheduler only
    activity: float = 1.0               # probability that a worker steps in a round
    random_phase: bool = False          # random first cell per worker
    record_commits: bool = False
    cell_edges: Optional[Sequence[int]] = None
    timeout: float = 600.0              # async scheduler only
    poll_interval: float = 0.005

    def validate(self):
        if self.scheduler not in ('deterministic', 'async'):
            raise ConfigError(f"Unknown scheduler '{self.scheduler}'")
        if not 0 < self.activity <= 1:
            raise ConfigError(f"activity must be in ]0, 1], got {self.activity}")
        if self.max_iter < 1:
            raise ConfigError(f"max_iter must be >= 1, got {self.max_iter}")


@dataclass(frozen=True)
class Commit:
    """Accepted update; tick is the round (deterministic) or a monotonic timestamp"""
    tick: float
    worker: int
    k: int
    position: Tuple[int, ...]
    dz: float


def divergence_threshold(D: Dictionary, threshold_factor: float = 50.0) -> float:
    """min_k factor / ||D_k||_inf over atoms with a nonzero norm"""
    inf_norms = D.inf_norms()
    inf_norms = inf_norms[inf_norms > 0]
    if inf_norms.size == 0:
        return float('inf')
    return float(np.min(threshold_factor / inf_norms))


class WorkerState:
    """Local slabs and protocol state of one worker"""

    def __init__(self, worker: int, grid: WorkerGrid, ctx: CodingContext,
                 z: np.ndarray, beta: np.ndarray, tol: float,
                 options: RuntimeOptions, path: List[int]):
        self.worker = worker
        self.grid = grid
        self.ctx = ctx
        self.tol = tol
        self.options = options
        self.sub = grid.sub_domain(worker)
        self.geometry = border_geometry(self.sub, grid.support, grid.domain)
        self.halo = self.geometry.halo
        self.origin = self.halo.lo
        self.extension = self.geometry.extension
        self.neighbors = grid.neighbors(worker)
        # slabs over S_w u E_L(S_w)
        self.z = z
        self.beta = beta
        self.cells = make_sub_partition(self.sub, grid.support, options.cell_edges)
        self.cell = 0
        self.quiet = 0
        self.status = WorkerStatus.ACTIVE
        self.exhausted = False
        self.abort_reason = ''
        self.z_limit = divergence_threshold(ctx.D, options.divergence_factor)

        self.epoch = 0
        self.seq = 0
        self.path = path
        self.path_pos = path.index(worker)
        self.held_token: Optional[ControlMessage] = None
        self.announced: Optional[Tuple[int, int]] = None
        self.probe_round = 0
        self.probe_out = False

        self.stats = {
            'iterations': 0,
            'updates': 0,
            'soft_locked': 0,
            'messages_sent': 0,
            'messages_received': 0,
            'emitting_iterations': 0,
            'scanned': 0,
            'busy_sec': 0.0,
        }

    @property
    def finished(self) -> bool:
        return self.status in (WorkerStatus.DONE, WorkerStatus.DIVERGED)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def local_z(self) -> np.ndarray:
        return self.z[(slice(None),) + self.sub.slices(self.origin)]

    def get_stats(self) -> Dict[str, Any]:
        stats = dict(self.stats)
        stats.update({
            'worker': self.worker,
            'coords': list(self.grid.coords(self.worker)),
            'status': self.status.value,
            'epoch': self.epoch,
            'exhausted': self.exhausted,
        })
        return stats

    # -- messages ---------------------------------------------------------

    def handle(self, message: Message, transport: Transport):
        if isinstance(message, UpdateMessage):
            self._handle_update(message)
        else:
            self._handle_control(message, transport)

    def _handle_update(self, msg: UpdateMessage):
        if self.sub.contains(msg.position):
            raise ProtocolError(f"Worker {self.worker} got an update for its own position "
                                f"{msg.position} from worker {msg.origin}")
        if not neighborhood(msg.position, self.grid.support).overlaps(self.halo):
            raise ProtocolError(f"Worker {self.worker} got an update at {msg.position} "
                                f"outside its halo {self.halo.to_dict()}")
        self.ctx.apply(self.z, self.beta, self.origin, msg.k, msg.position, msg.z_new, msg.dz)
        self.stats['messages_received'] += 1
        self.quiet = 0
        if self.status == WorkerStatus.PAUSED:
            # invalidates any pause this worker has announced
            self.epoch += 1
            if not self.exhausted:
                self.status = WorkerStatus.ACTIVE

    def _flood(self, transport: Transport, kind: ControlKind, exclude: int = -1, reason: str = ''):
        for w in self.neighbors:
            if w != exclude:
                transport.send(self.worker, w, ControlMessage(kind, self.worker, reason=reason))

    def _handle_control(self, msg: ControlMessage, transport: Transport):
        if msg.kind in (ControlKind.GLOBAL_DONE, ControlKind.ABORT):
            if self.finished:
                return
            self.status = WorkerStatus.DONE
            self.abort_reason = msg.reason
            self._flood(transport, msg.kind, exclude=msg.sender, reason=msg.reason)
        elif msg.kind == ControlKind.PAUSE_ANNOUNCE:
            self.held_token = msg
        elif msg.kind == ControlKind.WAKE_PROBE:
            dirty = (msg.dirty or self.status != WorkerStatus.PAUSED
                     or self.announced != (msg.epoch, self.epoch))
            if self.path_pos == 0:
                self._conclude(transport, dirty, msg.balance)
            else:
                transport.send(self.worker, self.path[self.path_pos - 1], ControlMessage(
                    ControlKind.WAKE_PROBE, self.worker, msg.epoch, msg.balance, dirty))
        else:
            raise ProtocolError(f"Unknown control message {msg.kind}")

    def _balance(self) -> int:
        return self.stats['messages_sent'] - self.stats['messages_received']

    def _conclude(self, transport: Transport, dirty: bool, balance: int):
        self.probe_out = False
        if dirty or balance != 0:
            return
        if self.status != WorkerStatus.PAUSED or self.announced != (self.probe_round, self.epoch):
            return
        logger.debug(f"Worker {self.worker}: termination detected at probe {self.probe_round}")
        self.status = WorkerStatus.DONE
        self._flood(transport, ControlKind.GLOBAL_DONE)

    def advance_token(self, transport: Transport):
        """Forward or start the termination token; only called while paused"""
        last = len(self.path) - 1
        if self.held_token is not None:
            token, self.held_token = self.held_token, None
            self.announced = (token.epoch, self.epoch)
            balance = token.balance + self._balance()
            if self.path_pos == last:
                transport.send(self.worker, self.path[last - 1], ControlMessage(
                    ControlKind.WAKE_PROBE, self.worker, token.epoch, balance, token.dirty))
            else:
                transport.send(self.worker, self.path[self.path_pos + 1], ControlMessage(
                    ControlKind.PAUSE_ANNOUNCE, self.worker, token.epoch, balance, token.dirty))
        elif self.path_pos == 0 and not self.probe_out:
            self.probe_round += 1
            self.announced = (self.probe_round, self.epoch)
            if last == 0:
                self._conclude(transport, False, self._balance())
                return
            self.probe_out = True
            transport.send(self.worker, self.path[1], ControlMessage(
                ControlKind.PAUSE_ANNOUNCE, self.worker, self.probe_round, self._balance()))

    # -- local coordinate descent ----------------------------------------

    def _soft_locked(self, cand) -> bool:
        nb = neighborhood(cand.position, self.grid.support)
        competitors = []
        for box in self.extension:
            region = box.intersect(nb)
            if region.is_empty():
                continue
            _, dz = self.ctx.delta_field(self.z, self.beta, region.slices(self.origin))
            mags = np.abs(dz)
            top = float(mags.max())
            if top < cand.magnitude:
                continue
            owner = -1
            if top == cand.magnitude:
                owner = min(self.grid.owner(tuple(lo + int(i) for lo, i in zip(region.lo, idx[1:])))
                            for idx in np.argwhere(mags == top))
            competitors.append((top, owner))
        return not soft_lock_check(cand.magnitude, competitors, self.worker)

    def _notify(self, transport: Transport, cand):
        if not self.geometry.in_extended_border(cand.position):
            return
        targets = sorted(notify_set(cand.position, self.grid, self.worker))
        for target in targets:
            self.seq += 1
            transport.send(self.worker, target, UpdateMessage(
                cand.k, cand.position, cand.dz, cand.z_new, self.worker, self.seq))
        self.stats['messages_sent'] += len(targets)
        if targets:
            self.stats['emitting_iterations'] += 1

    def step(self, transport: Transport, commits: Optional[list] = None, tick: float = 0) -> str:
        """One cell visit: select, soft-lock, commit, notify"""
        cell = self.cells[self.cell]
        cand = self.ctx.candidate(self.z, self.beta, cell, self.origin)
        self.stats['scanned'] += self.ctx.n_atoms * cell.size
        mag = cand.magnitude
        if mag > 0:
            self.stats['iterations'] += 1
        outcome = 'quiet'
        if mag >= self.tol:
            self.quiet = 0
            if (self.options.soft_lock and self.geometry.in_border(cand.position)
                    and self._soft_locked(cand)):
                self.stats['soft_locked'] += 1
                outcome = 'soft_locked'
            else:
                self.ctx.apply(self.z, self.beta, self.origin,
                               cand.k, cand.position, cand.z_new, cand.dz)
                self.stats['updates'] += 1
                outcome = 'updated'
                if commits is not None:
                    commits.append(Commit(tick, self.worker, cand.k, cand.position, cand.dz))
                self._notify(transport, cand)
                if abs(cand.z_new) > self.z_limit and divergence_guard(self):
                    logger.error(f"Worker {self.worker}: |Z| = {abs(cand.z_new):.3e} exceeds "
                                 f"{self.z_limit:.3e}, aborting")
                    self.status = WorkerStatus.DIVERGED
                    self.abort_reason = f"divergence on worker {self.worker}"
                    self._flood(transport, ControlKind.ABORT, reason=self.abort_reason)
                    return 'diverged'
        else:
            self.quiet += 1
        self.cell = (self.cell + 1) % self.n_cells
        if self.quiet >= self.n_cells:
            self.status = WorkerStatus.PAUSED
        elif self.stats['iterations'] >= self.options.max_iter:
            logger.warning(f"Worker {self.worker}: max_iter={self.options.max_iter} reached")
            self.exhausted = True
            self.status = WorkerStatus.PAUSED
        return outcome


def worker_iteration(state: WorkerState, transport: Transport,
                     commits: Optional[list] = None, tick: float = 0) -> str:
    """
    Drain the inbox, then visit the current cell when active

    Returns:
        outcome label: 'updated', 'soft_locked', 'quiet', 'idle', 'diverged' or 'finished'
    """
    if state.finished:
        return 'finished'
    start = time.perf_counter()
    for message in transport.receive_all(state.worker):
        state.handle(message, transport)
    outcome = 'idle'
    if state.status == WorkerStatus.ACTIVE:
        outcome = state.step(transport, commits, tick)
    if state.status == WorkerStatus.PAUSED:
        state.advance_token(transport)
    if state.finished and outcome == 'idle':
        outcome = 'finished'
    state.stats['busy_sec'] += time.perf_counter() - start
    return outcome


def divergence_guard(state: WorkerState, D: Optional[Dictionary] = None,
                     threshold_factor: Optional[float] = None) -> bool:
    """True when the local ||Z||_inf over S_w exceeds min_k factor / ||D_k||_inf"""
    limit = state.z_limit
    if D is not None or threshold_factor is not None:
        limit = divergence_threshold(D if D is not None else state.ctx.D,
                                     threshold_factor or state.options.divergence_factor)
    local = state.local_z()
    return bool(local.size) and lp_norm(local, np.inf, channel_axis=0) > limit


def convergence_consensus(states: Sequence[WorkerState],
                          pending_updates: int = 0) -> Optional[ControlKind]:
    """GLOBAL_DONE when every worker is paused (or done) and no update is in flight"""
    if pending_updates:
        return None
    for state in states:
        if state.status not in (WorkerStatus.PAUSED, WorkerStatus.DONE):
            return None
    return ControlKind.GLOBAL_DONE


def _confirm_termination(states: Sequence[WorkerState], transport: Transport) -> bool:
    """Cross-check a token-detected GLOBAL_DONE against the global worker state"""
    if any(s.abort_reason or s.status == WorkerStatus.DIVERGED for s in states):
        return True
    if convergence_consensus(states, transport.pending_updates()) is None:
        logger.error("Termination token concluded while a worker was active "
                     "or an update was in flight")
        return False
    return True


@dataclass
class RunStats:
    """Aggregated statistics of a distributed coding run"""
    workers: int
    grid: List[int]
    accepted: int
    soft_locked: int
    messages: int
    t_sec: float
    wall_sec: float
    objective: float
    converged: bool
    scheduler: str
    rounds: int = 0
    iterations: int = 0
    emitting_iterations: int = 0
    scanned: int = 0
    aborted: bool = False
    diverged_workers: List[int] = field(default_factory=list)
    per_worker: List[Dict[str, Any]] = field(default_factory=list)
    commits: List[Commit] = field(default_factory=list)
    links: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def acceptance_rate(self) -> float:
        tried = self.accepted + self.soft_locked
        return self.accepted / tried if tried else 1.0

    @property
    def message_fraction(self) -> float:
        """Fraction of coordinate iterations that emitted at least one message"""
        return self.emitting_iterations / self.iterations if self.iterations else 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            'workers': self.workers,
            'grid': self.grid,
            'accepted': self.accepted,
            'soft_locked': self.soft_locked,
            'messages': self.messages,
            't_sec': self.t_sec,
            'wall_sec': self.wall_sec,
            'objective': self.objective,
            'converged': self.converged,
            'scheduler': self.scheduler,
            'rounds': self.rounds,
            'iterations': self.iterations,
            'scanned': self.scanned,
            'acceptance_rate': self.acceptance_rate,
            'message_fraction': self.message_fraction,
            'aborted': self.aborted,
            'diverged_workers': self.diverged_workers,
            'per_worker': self.per_worker,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def assemble(states: Sequence[WorkerState], grid: WorkerGrid, n_atoms: int) -> ActivationMap:
    """Global Z from the owned part of each worker slab"""
    z = np.zeros((n_atoms,) + grid.domain.sizes)
    for state in states:
        z[(slice(None),) + state.sub.slices()] = state.local_z()
    return ActivationMap(z)


def check_halo_coherence(states: Sequence[WorkerState], grid: WorkerGrid) -> float:
    """Largest difference between a mirrored Z value and its owner's value"""
    z = assemble(states, grid, states[0].ctx.n_atoms).values
    worst = 0.0
    for state in states:
        owned = z[(slice(None),) + state.halo.slices()]
        worst = max(worst, float(np.max(np.abs(owned - state.z))))
    return worst


def audit_commits(commits: Sequence[Commit], support: Sequence[int]) -> List[Tuple[Commit, Commit]]:
    """Pairs of commits from distinct workers at the same tick with overlapping neighborhoods"""
    by_tick: Dict[float, List[Commit]] = {}
    for commit in commits:
        by_tick.setdefault(commit.tick, []).append(commit)
    conflicts = []
    for group in by_tick.values():
        for i, a in enumerate(group):
            for b in group[i + 1:]:
                if a.worker != b.worker and all(
                        abs(pa - pb) < l for pa, pb, l in zip(a.position, b.position, support)):
                    conflicts.append((a, b))
    return conflicts


def _init_workers(X: Signal, D: Dictionary, grid: WorkerGrid, ctx: CodingContext,
                  tol: float, options: RuntimeOptions,
                  z0: Optional[ActivationMap]) -> List[WorkerState]:
    support = D.support.sizes
    path = token_path(grid)
    rng = check_random_state(options.seed)
    if z0 is not None:
        z_full, beta_full = init_state(X, D, z0)
    else:
        x_full = X.padded(support)
    states = []
    for w in range(grid.n_workers):
        halo = grid.halo(w)
        index = (slice(None),) + halo.slices()
        if z0 is not None:
            z = z_full.values[index].copy()
            beta = beta_full.values[index].copy()
        else:
            window = tuple(slice(lo, hi + l - 1) for lo, hi, l in zip(halo.lo, halo.hi, support))
            beta = correlate_array(x_full[window], D.values)
            z = np.zeros_like(beta)
        state = WorkerState(w, grid, ctx, z, beta, tol, options, path)
        if options.random_phase:
            state.cell = int(rng.randint(state.n_cells))
        states.append(state)
    return states


def _run_deterministic(states: List[WorkerState], transport: QueueTransport,
                       options: RuntimeOptions, commits: Optional[list]) -> Tuple[int, bool]:
    """Round-synchronous scheduler; returns (rounds, terminated)"""
    rng = check_random_state(options.seed)
    n = len(states)
    max_rounds = options.max_rounds or (int(options.max_iter / options.activity) + 64 * n + 64)
    for r in range(max_rounds):
        transport.deliver(rng)
        if all(s.finished for s in states):
            return r, _confirm_termination(states, transport)
        order = rng.permutation(n)
        if options.activity < 1.0:
            order = [w for w in order if rng.random_sample() < options.activity]
        # messages sent during the round wait in their channels until the next one
        for w in order:
            worker_iteration(states[w], transport, commits, r)
    logger.warning(f"Deterministic scheduler stopped after {max_rounds} rounds")
    return max_rounds, False


def _run_threaded(states: List[WorkerState], transport: ThreadedTransport,
                  options: RuntimeOptions, commits: Optional[list]) -> bool:
    deadline = time.monotonic() + options.timeout

    def loop(state: WorkerState) -> int:
        while not state.finished and not transport.closed:
            try:
                worker_iteration(state, transport, commits, time.monotonic())
            except TransportError:
                if transport.closed:
                    break
                raise
            if state.status == WorkerStatus.PAUSED:
                transport.wait(state.worker, options.poll_interval)
            if time.monotonic() > deadline:
                raise TransportError(f"Worker {state.worker} timed out after {options.timeout}s")
        return state.worker

    errors = []
    with ThreadPoolExecutor(max_workers=len(states)) as executor:
        future_to_worker = {executor.submit(loop, s): s.worker for s in states}
        for future in as_completed(future_to_worker):
            worker = future_to_worker[future]
            try:
                future.result()
            except Exception as e:
                logger.error(f"Worker {worker} failed: {e}", exc_info=True)
                errors.append(e)
                transport.close()
    if errors:
        raise errors[0]
    return all(s.finished for s in states) and _confirm_termination(states, transport)


def run_dicodile_z(X: Signal, D: Dictionary, lmbd: float, grid: WorkerGrid,
                   tol: Optional[float] = None, options: Optional[RuntimeOptions] = None,
                   z0: Optional[ActivationMap] = None) -> Tuple[ActivationMap, RunStats]:
    """
    Distributed convolutional sparse coding with W workers

    Args:
        X: signal
        D: dictionary
        lmbd: regularization parameter
        grid: worker grid built for X's domain and D's support
        tol: per-coordinate stopping threshold (default as in csc_solver)
        options: runtime options
        z0: optional warm start

    Returns:
        (Z, RunStats)

    Raises:
        DivergenceError: a worker tripped the divergence guard (partial Z attached)
        TransportError: the async backend timed out or the fabric failed
    """
    options = options or RuntimeOptions()
    options.validate()
    check_signal_shapes(X, D)
    if grid.domain != X.domain:
        raise ShapeError("Grid domain does not match the signal",
                         expected=X.domain.sizes, actual=grid.domain.sizes)
    if tuple(grid.support) != D.support.sizes:
        raise ShapeError("Grid support does not match the dictionary",
                         expected=D.support.sizes, actual=grid.support)
    if tol is None:
        tol = default_tolerance(D, lmbd)
    if tol <= 0:
        raise ValueError(f"Tolerance must be positive, got {tol}")

    ctx = CodingContext(D, lmbd)
    ctx.dtd  # shared table, built before any worker starts
    states = _init_workers(X, D, grid, ctx, tol, options, z0)
    commits = [] if options.record_commits else None
    logger.info(f"DiCoDiLe-Z: {grid.n_workers} workers, grid {grid.counts}, "
                f"scheduler={options.scheduler}, soft_lock={options.soft_lock}")

    start = time.perf_counter()
    rounds = 0
    if options.scheduler == 'deterministic':
        transport = QueueTransport(grid.n_workers)
        rounds, terminated = _run_deterministic(states, transport, options, commits)
    else:
        transport = ThreadedTransport(grid.n_workers)
        terminated = _run_threaded(states, transport, options, commits)
    wall = time.perf_counter() - start

    z_hat = assemble(states, grid, D.n_atoms)
    diverged = [s.worker for s in states if s.status == WorkerStatus.DIVERGED]
    aborted = bool(diverged) or any(s.abort_reason for s in states)
    per_worker = [s.get_stats() for s in states]
    busy = max(s.stats['busy_sec'] for s in states)
    obj = float('nan') if diverged else objective(X, z_hat, D, lmbd)
    stats = RunStats(
        workers=grid.n_workers,
        grid=list(grid.counts),
        accepted=sum(s.stats['updates'] for s in states),
        soft_locked=sum(s.stats['soft_locked'] for s in states),
        messages=transport.get_stats()['updates_sent'],
        t_sec=busy if options.scheduler == 'deterministic' else wall,
        wall_sec=wall,
        objective=obj,
        converged=terminated and not aborted and not any(s.exhausted for s in states),
        scheduler=options.scheduler,
        rounds=rounds,
        iterations=sum(s.stats['iterations'] for s in states),
        emitting_iterations=sum(s.stats['emitting_iterations'] for s in states),
        scanned=sum(s.stats['scanned'] for s in states),
        aborted=aborted,
        diverged_workers=diverged,
        per_worker=per_worker,
        commits=commits or [],
        links=sorted(transport.links),
    )

    if diverged:
        raise DivergenceError(f"Divergence guard tripped on workers {diverged}",
                              workers=diverged, z_hat=z_hat, stats=stats)
    logger.info(f"DiCoDiLe-Z done: converged={stats.converged}, accepted={stats.accepted}, "
                f"soft_locked={stats.soft_locked}, messages={stats.messages}, "
                f"t={stats.t_sec:.3f}s")
    return z_hat, stats
