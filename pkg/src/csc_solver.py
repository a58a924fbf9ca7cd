"""
Convolutional sparse coding by coordinate descent
Greedy, randomized and locally greedy (LGCD) coordinate selection with an
incrementally maintained auxiliary variable beta.
"""
import json
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.utils import check_random_state

from .exceptions import EmptyRegionError, ShapeError
from .tensor_core import (
    ActivationMap, Dictionary, Signal, SubDomain,
    atom_cross_correlation, check_code_shapes, check_signal_shapes,
    correlate_array, objective, residual_full,
)

logger = logging.getLogger(__name__)


class SelectionStrategy(str, Enum):
    """Coordinate selection rules"""
    GREEDY = 'greedy'
    RANDOMIZED = 'randomized'
    LOCALLY_GREEDY = 'lgcd'


@dataclass
class AuxBeta:
    """beta_k[w]: correlation of the coordinate-removed residual with atom k"""
    values: np.ndarray


@dataclass(frozen=True)
class CandidateUpdate:
    """Optimal one-coordinate move (k0, w0) -> Z'"""
    k: int
    position: Tuple[int, ...]
    z_old: float
    z_new: float

    @property
    def dz(self) -> float:
        return self.z_new - self.z_old

    @property
    def magnitude(self) -> float:
        return abs(self.z_new - self.z_old)


def make_sub_partition(region: SubDomain, support: Sequence[int],
                       cell_edges: Optional[Sequence[int]] = None) -> List[SubDomain]:
    """
    Split a region into disjoint axis-aligned cells

    Cells have edge 2 L_i by default (size 2^d |Theta|); the last cell along
    each axis absorbs the remainder. Cells are returned in row-major order.

    Args:
        region: box to partition
        support: atom support sizes L
        cell_edges: optional explicit cell edges (1 gives unit cells)

    Returns:
        List of cells covering the region
    """
    if region.is_empty():
        raise EmptyRegionError(f"Cannot partition empty region {region}")
    edges = cell_edges if cell_edges is not None else [2 * l for l in support]
    bounds = []
    for lo, hi, edge in zip(region.lo, region.hi, edges):
        n_cells = max(1, (hi - lo) // max(1, int(edge)))
        cuts = [lo + j * int(edge) for j in range(n_cells)] + [hi]
        bounds.append(list(zip(cuts[:-1], cuts[1:])))
    cells = []
    for combo in np.ndindex(*[len(b) for b in bounds]):
        lo = tuple(bounds[i][c][0] for i, c in enumerate(combo))
        hi = tuple(bounds[i][c][1] for i, c in enumerate(combo))
        cells.append(SubDomain(lo, hi))
    return cells


class CodingContext:
    """Read-only quantities shared by every coordinate update of a coding run.

    Instances are shared between workers; nothing here is mutated after
    construction apart from the lazily built cross-correlation table.
    """

    def __init__(self, D: Dictionary, lmbd: float):
        if lmbd < 0:
            raise ValueError(f"Regularization must be nonnegative, got {lmbd}")
        self.D = D
        self.lmbd = float(lmbd)
        self.support = D.support.sizes
        self.n_atoms = D.n_atoms
        self.sq_norms = D.sq_norms()
        self.active = self.sq_norms > 0
        inv = np.zeros_like(self.sq_norms)
        inv[self.active] = 1.0 / self.sq_norms[self.active]
        self.inv_norms = inv
        self.frozen_atoms = [int(k) for k in np.flatnonzero(~self.active)]
        if self.frozen_atoms:
            logger.warning(f"Atoms with zero norm are frozen: {self.frozen_atoms}")
        self._dtd = None

    @property
    def dtd(self) -> np.ndarray:
        if self._dtd is None:
            self._dtd = atom_cross_correlation(self.D)
        return self._dtd

    def _broadcast(self, arr: np.ndarray, ndim: int) -> np.ndarray:
        return arr.reshape((-1,) + (1,) * ndim)

    def delta_field(self, z: np.ndarray, beta: np.ndarray,
                    slices: Tuple[slice, ...]) -> Tuple[np.ndarray, np.ndarray]:
        """Optimal moves on a window: returns (Z' , Z' - Z) over [K] x window"""
        index = (slice(None),) + tuple(slices)
        z_cur = z[index]
        b_cur = beta[index]
        ndim = z_cur.ndim - 1
        shrunk = np.sign(b_cur) * np.maximum(np.abs(b_cur) - self.lmbd, 0.0)
        z_new = shrunk * self._broadcast(self.inv_norms, ndim)
        # zero-norm atoms never move
        z_new = np.where(self._broadcast(self.active, ndim), z_new, z_cur)
        return z_new, z_new - z_cur

    def candidate(self, z: np.ndarray, beta: np.ndarray, cell: SubDomain,
                  origin: Sequence[int]) -> CandidateUpdate:
        """Best move in `cell`; ties go to the smallest (k, row-major position)"""
        if cell.is_empty():
            raise EmptyRegionError(f"Empty candidate region {cell}")
        z_new, dz = self.delta_field(z, beta, cell.slices(origin))
        flat = int(np.argmax(np.abs(dz)))
        idx = np.unravel_index(flat, dz.shape)
        k = int(idx[0])
        position = tuple(int(i) + lo for i, lo in zip(idx[1:], cell.lo))
        return CandidateUpdate(k, position, float(z_new[idx] - dz[idx]), float(z_new[idx]))

    def apply(self, z: np.ndarray, beta: np.ndarray, origin: Sequence[int],
              k0: int, position: Sequence[int], z_new: float, dz: float) -> int:
        """
        Apply Z_k0[w0] <- z_new on a slab and update beta on V(w0) (Eq. 8)

        Args:
            z, beta: slab arrays (K, *shape) whose [0] sits at global `origin`
            k0, position: updated coordinate (global)
            z_new: new value of the coordinate
            dz: change of the coordinate

        Returns:
            Number of beta entries touched
        """
        shape = z.shape[1:]
        local = [p - o for p, o in zip(position, origin)]
        start = [c - l + 1 for c, l in zip(local, self.support)]
        win, table = [], []
        for s, n, l in zip(start, shape, self.support):
            a, b = max(s, 0), min(s + 2 * l - 1, n)
            if a >= b:
                return 0
            win.append(slice(a, b))
            table.append(slice(a - s, b - s))
        inside = all(0 <= c < n for c, n in zip(local, shape))
        own = (k0,) + tuple(local)
        if inside:
            kept = beta[own]
        beta[(slice(None),) + tuple(win)] -= dz * self.dtd[(k0, slice(None)) + tuple(table)]
        if inside:
            # beta excludes the coordinate's own contribution
            beta[own] = kept
            z[own] = z_new
        return self.n_atoms * int(np.prod([w.stop - w.start for w in win]))


def init_state(X: Signal, D: Dictionary,
               z0: Optional[ActivationMap] = None) -> Tuple[ActivationMap, AuxBeta]:
    """
    Initial (Z, beta) for coordinate descent

    With z0 = None this is Z = 0 and beta = X * D~. A warm start z0 gives
    beta_k[w] = ((X - Z * D) * D~_k)[w] + Z_k[w] ||D_k||^2.
    """
    check_signal_shapes(X, D)
    if z0 is None:
        z0 = ActivationMap.zeros(X.domain, D.n_atoms)
    check_code_shapes(z0, D)
    if z0.domain != X.domain:
        raise ShapeError("Initial code must live on the signal domain",
                         expected=X.domain.sizes, actual=z0.domain.sizes)
    z = z0.values.copy()
    if np.any(z):
        res = residual_full(X, z0, D)
    else:
        res = X.padded(D.support.sizes)
    beta = correlate_array(res, D.values)
    beta += z * D.sq_norms().reshape((-1,) + (1,) * X.domain.d)
    return ActivationMap(z), AuxBeta(beta)


def best_candidate(region: SubDomain, z_hat: ActivationMap, beta: AuxBeta,
                   D: Dictionary, lmbd: float) -> CandidateUpdate:
    """Coordinate of `region` with the largest optimal move |dZ| (Eq. 6)"""
    if region.is_empty():
        raise EmptyRegionError(f"Empty candidate region {region}")
    if not region.intersect(SubDomain.from_domain(z_hat.domain)) == region:
        raise EmptyRegionError(f"Region {region} is not inside {z_hat.domain.sizes}")
    ctx = CodingContext(D, lmbd)
    return ctx.candidate(z_hat.values, beta.values, region, (0,) * z_hat.domain.d)


def apply_update(z_hat: ActivationMap, beta: AuxBeta, update: CandidateUpdate,
                 D: Dictionary, ctx: Optional[CodingContext] = None) -> Tuple[ActivationMap, AuxBeta]:
    """Commit a candidate in place and keep beta consistent"""
    if update.dz == 0:
        return z_hat, beta
    ctx = ctx or CodingContext(D, 0.0)
    ctx.apply(z_hat.values, beta.values, (0,) * z_hat.domain.d,
              update.k, update.position, update.z_new, update.dz)
    return z_hat, beta


def cost_delta(update: CandidateUpdate, z_hat: ActivationMap, beta: AuxBeta,
               D: Dictionary, lmbd: float) -> float:
    """
    Decrease of the objective produced by a single update (positive = better)

    dE = ||D_k||^2 / 2 (Z^2 - Z'^2) - beta (Z - Z') + lmbd (|Z| - |Z'|)
    """
    norm = float(D.sq_norms()[update.k])
    b = float(beta.values[(update.k,) + tuple(update.position)])
    z, zp = update.z_old, update.z_new
    return 0.5 * norm * (z * z - zp * zp) - b * (z - zp) + lmbd * (abs(z) - abs(zp))


def default_tolerance(D: Dictionary, lmbd: float) -> float:
    """1e-2 lmbd / max_k ||D_k||^2, with a floor for lmbd = 0"""
    max_norm = float(np.max(D.sq_norms())) if D.n_atoms else 0.0
    if lmbd <= 0 or max_norm <= 0:
        return 1e-8
    return 1e-2 * lmbd / max_norm


def optimality_residual(z_hat: ActivationMap, beta: AuxBeta, D: Dictionary, lmbd: float) -> float:
    """max_{k, w} |Z_k[w] - ST(beta_k[w], lmbd) / ||D_k||^2|"""
    ctx = CodingContext(D, lmbd)
    _, dz = ctx.delta_field(z_hat.values, beta.values,
                            SubDomain.from_domain(z_hat.domain).slices())
    return float(np.max(np.abs(dz))) if dz.size else 0.0


@dataclass
class ConvergenceLog:
    """Checkpoints of a coordinate descent run"""
    strategy: str
    records: List[Dict[str, float]] = field(default_factory=list)
    converged: bool = False
    n_iter: int = 0
    n_updates: int = 0
    n_scanned: int = 0
    frozen_atoms: List[int] = field(default_factory=list)

    def add(self, n_iter: int, t_sec: float, max_dz: float, obj: Optional[float] = None):
        record = {'iter': n_iter, 't_sec': t_sec, 'max_dz': max_dz}
        if obj is not None:
            record['objective'] = obj
        self.records.append(record)

    @property
    def runtime(self) -> float:
        return self.records[-1]['t_sec'] if self.records else 0.0

    @property
    def final_objective(self) -> Optional[float]:
        for record in reversed(self.records):
            if 'objective' in record:
                return record['objective']
        return None

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(r) for r in self.records) + "\n"

    def save(self, path: Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'a', encoding='utf-8') as f:
            f.write(self.to_jsonl())

    def summary(self) -> Dict[str, Any]:
        return {
            'strategy': self.strategy,
            'converged': self.converged,
            'n_iter': self.n_iter,
            'n_updates': self.n_updates,
            'n_scanned': self.n_scanned,
            'runtime': self.runtime,
            'objective': self.final_objective,
            'frozen_atoms': self.frozen_atoms,
        }


def solve(X: Signal, D: Dictionary, lmbd: float,
          strategy: SelectionStrategy = SelectionStrategy.LOCALLY_GREEDY,
          tol: Optional[float] = None, max_iter: int = 1_000_000,
          z0: Optional[ActivationMap] = None, seed=None,
          cell_edges: Optional[Sequence[int]] = None,
          checkpoint_every: int = 0) -> Tuple[ActivationMap, ConvergenceLog]:
    """
    Solve min_Z 1/2 ||X - Z * D||^2 + lmbd ||Z||_1 by coordinate descent

    Args:
        X: signal to encode
        D: dictionary
        lmbd: regularization parameter
        strategy: coordinate selection rule
        tol: stop once a full pass offers no move larger than tol
        max_iter: iteration budget (cells with an all-zero move are not counted)
        z0: optional warm start
        seed: seed of the randomized strategy
        cell_edges: LGCD cell edges, default 2 L
        checkpoint_every: evaluate the objective every n iterations (0 = only at the end)

    Returns:
        (Z, ConvergenceLog); log.converged is False when max_iter was hit
    """
    strategy = SelectionStrategy(strategy)
    if tol is None:
        tol = default_tolerance(D, lmbd)
    if tol <= 0:
        raise ValueError(f"Tolerance must be positive, got {tol}")

    ctx = CodingContext(D, lmbd)
    z_hat, beta = init_state(X, D, z0)
    z, b = z_hat.values, beta.values
    domain = SubDomain.from_domain(X.domain)
    origin = domain.lo
    log = ConvergenceLog(strategy=strategy.value, frozen_atoms=ctx.frozen_atoms)
    start = time.perf_counter()

    if strategy == SelectionStrategy.RANDOMIZED:
        _run_randomized(ctx, z, b, domain, tol, max_iter, seed, log, start, X, checkpoint_every)
    else:
        if strategy == SelectionStrategy.GREEDY:
            cells = [domain]
        else:
            cells = make_sub_partition(domain, ctx.support, cell_edges)
        n_cells = len(cells)
        m, quiet, window_max = 0, 0, 0.0
        while True:
            cell = cells[m]
            cand = ctx.candidate(z, b, cell, origin)
            log.n_scanned += ctx.n_atoms * cell.size
            mag = cand.magnitude
            if mag > 0:
                log.n_iter += 1
            if mag >= tol:
                ctx.apply(z, b, origin, cand.k, cand.position, cand.z_new, cand.dz)
                log.n_updates += 1
                quiet = 0
            else:
                quiet += 1
            window_max = max(window_max, mag)
            m = (m + 1) % n_cells
            if checkpoint_every and log.n_iter and log.n_iter % checkpoint_every == 0 and mag > 0:
                log.add(log.n_iter, time.perf_counter() - start, window_max,
                        objective(X, z_hat, D, lmbd))
            if m == 0:
                if not checkpoint_every:
                    log.add(log.n_iter, time.perf_counter() - start, window_max)
                window_max = 0.0
            if quiet >= n_cells:
                log.converged = True
                break
            if log.n_iter >= max_iter:
                logger.warning(f"{strategy.value}: max_iter={max_iter} reached before convergence")
                break

    final = objective(X, z_hat, D, lmbd)
    log.add(log.n_iter, time.perf_counter() - start,
            optimality_residual(z_hat, beta, D, lmbd), final)
    logger.debug(f"{strategy.value}: {log.n_updates} updates, converged={log.converged}, "
                 f"objective={final:.6e}")
    return z_hat, log


def _run_randomized(ctx: CodingContext, z: np.ndarray, b: np.ndarray, domain: SubDomain,
                    tol: float, max_iter: int, seed, log: ConvergenceLog, start: float,
                    X: Signal, checkpoint_every: int):
    """Uniform (k, w) draws; a full scan every K |Omega| draws checks convergence"""
    rng = check_random_state(seed)
    shape = (ctx.n_atoms,) + domain.shape
    epoch = int(np.prod(shape))
    full = domain.slices()
    while log.n_iter < max_iter:
        draws = rng.randint(0, epoch, size=min(epoch, max_iter - log.n_iter))
        for flat in draws:
            idx = np.unravel_index(int(flat), shape)
            k, position = int(idx[0]), tuple(int(i) for i in idx[1:])
            cell = SubDomain(position, tuple(p + 1 for p in position))
            z_new, dz = ctx.delta_field(z, b, cell.slices())
            delta = float(dz[k].ravel()[0])
            log.n_iter += 1
            log.n_scanned += 1
            if abs(delta) >= tol:
                ctx.apply(z, b, domain.lo, k, position, float(z_new[k].ravel()[0]), delta)
                log.n_updates += 1
        _, dz = ctx.delta_field(z, b, full)
        max_dz = float(np.max(np.abs(dz)))
        log.add(log.n_iter, time.perf_counter() - start, max_dz)
        if max_dz < tol:
            log.converged = True
            return
    logger.warning(f"randomized: max_iter={max_iter} reached before convergence")
