"""
Worker grid geometry and the soft-lock arbitration rules

Everything in this module is a pure function of its inputs: partitioning
of the signal domain, border/extension sets of a sub-domain, routing of
update notifications, soft-lock acceptance and the interference term of
simultaneous updates.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .exceptions import GridError
from .tensor_core import Dictionary, Domain, SubDomain, neighborhood, pair_cross_correlation

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class WorkerGrid:
    """Cartesian grid of W = prod W_i workers, worker index row-major over coordinates"""
    domain: Domain
    support: Tuple[int, ...]
    counts: Tuple[int, ...]
    cuts: Tuple[Tuple[int, ...], ...]

    @property
    def n_workers(self) -> int:
        return int(np.prod(self.counts))

    def coords(self, worker: int) -> Tuple[int, ...]:
        return tuple(int(c) for c in np.unravel_index(worker, self.counts))

    def index(self, coords: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(coords), self.counts))

    def sub_domain(self, worker: int) -> SubDomain:
        c = self.coords(worker)
        return SubDomain(tuple(cut[i] for cut, i in zip(self.cuts, c)),
                         tuple(cut[i + 1] for cut, i in zip(self.cuts, c)))

    def halo(self, worker: int) -> SubDomain:
        """S_w together with its Theta-extension"""
        return self.sub_domain(worker).expand(self.support).clip(self.domain)

    def owner(self, position: Sequence[int]) -> int:
        if not self.domain.contains(position):
            raise GridError(f"Position {tuple(position)} is outside {self.domain.sizes}")
        coords = [int(np.searchsorted(cut, p, side='right')) - 1
                  for cut, p in zip(self.cuts, position)]
        return self.index(coords)

    def neighbors(self, worker: int) -> List[int]:
        """Workers at Chebyshev distance 1 in grid coordinates"""
        c = np.array(self.coords(worker))
        found = []
        for offset in np.ndindex(*(3,) * len(self.counts)):
            delta = np.array(offset) - 1
            if not delta.any():
                continue
            other = c + delta
            if np.all(other >= 0) and np.all(other < self.counts):
                found.append(self.index(other))
        return sorted(found)

    def to_dict(self):
        return {
            'domain': list(self.domain.sizes),
            'support': list(self.support),
            'counts': list(self.counts),
            'n_workers': self.n_workers,
        }


def _factorizations(n: int, d: int) -> Iterable[Tuple[int, ...]]:
    if d == 1:
        yield (n,)
        return
    for f in range(1, n + 1):
        if n % f == 0:
            for rest in _factorizations(n // f, d - 1):
                yield (f,) + rest


def _axis_cuts(size: int, count: int) -> Tuple[int, ...]:
    # the first size % count blocks get one extra row
    base, extra = divmod(size, count)
    cuts = [0]
    for j in range(count):
        cuts.append(cuts[-1] + base + (1 if j < extra else 0))
    return tuple(cuts)


def grid_from_counts(domain: Domain, counts: Sequence[int], support: Sequence[int]) -> WorkerGrid:
    """Grid with the given per-axis worker counts; sub-domain edges are not checked"""
    counts = tuple(int(w) for w in counts)
    if len(counts) != domain.d or min(counts) < 1:
        raise GridError(f"Invalid worker counts {counts} for a {domain.d}D domain")
    cuts = tuple(_axis_cuts(t, w) for t, w in zip(domain.sizes, counts))
    return WorkerGrid(domain, tuple(int(l) for l in support), counts, cuts)


def max_feasible_workers(domain: Domain, support: Sequence[int], split: str = 'auto') -> int:
    """Largest W for which every sub-domain edge can stay >= 2 L_i"""
    per_axis = [t // (2 * l) for t, l in zip(domain.sizes, support)]
    if split == '1d':
        return per_axis[0]
    return int(np.prod(per_axis))


def make_grid(domain: Domain, n_workers: int, support: Sequence[int],
              split: str = 'auto') -> WorkerGrid:
    """
    Partition the domain into a grid of n_workers contiguous sub-domains

    Args:
        domain: signal domain Omega
        n_workers: total number of workers W
        support: atom support sizes L
        split: 'auto' picks the most square sub-domains, '1d' splits along
            the first axis only

    Returns:
        WorkerGrid

    Raises:
        GridError: no factorization keeps sub-domain edges >= 2 L_i
    """
    support = tuple(int(l) for l in support)
    if n_workers < 1:
        raise GridError(f"Worker count must be >= 1, got {n_workers}")
    if len(support) != domain.d:
        raise GridError(f"Support dimension {len(support)} does not match domain {domain.d}")
    if split not in ('auto', '1d'):
        raise GridError(f"Unknown split mode '{split}'")

    if split == '1d':
        candidates = [(n_workers,) + (1,) * (domain.d - 1)]
    else:
        candidates = list(_factorizations(n_workers, domain.d))

    best, best_score = None, None
    for counts in candidates:
        edges = [t // w for t, w in zip(domain.sizes, counts)]
        if any(e < 2 * l for e, l in zip(edges, support)):
            continue
        score = max(edges) / min(edges)
        if best_score is None or score < best_score:
            best, best_score = counts, score

    if best is None:
        max_w = max_feasible_workers(domain, support, split)
        raise GridError(f"No {split} grid of {n_workers} workers keeps edges >= 2L on "
                        f"{domain.sizes} with L={support}; max feasible W is {max_w}",
                        max_feasible=max_w)

    grid = grid_from_counts(domain, best, support)
    logger.debug(f"Grid {grid.counts} for W={n_workers} on {domain.sizes}")
    return grid


def _rim_boxes(outer: SubDomain, inner: SubDomain) -> List[SubDomain]:
    """Disjoint boxes covering outer minus inner (inner inside outer)"""
    if inner.is_empty():
        return [] if outer.is_empty() else [outer]
    boxes = []
    lo, hi = list(outer.lo), list(outer.hi)
    for i in range(outer.d):
        if inner.lo[i] > lo[i]:
            boxes.append(SubDomain(lo, hi[:i] + [inner.lo[i]] + hi[i + 1:]))
        if inner.hi[i] < hi[i]:
            boxes.append(SubDomain(lo[:i] + [inner.hi[i]] + lo[i + 1:], hi))
        lo[i], hi[i] = inner.lo[i], inner.hi[i]
    return boxes


@dataclass(frozen=True)
class BorderGeometry:
    """
    Border sets of a sub-domain S_w

    border:           B_L(S_w), points of S_w closer than L_i to its boundary on some axis
    extended_border:  B_2L(S_w), same with width 2 L_i
    extension:        E_L(S_w), points of Omega outside S_w within L_i of it on every axis
    """
    sub: SubDomain
    support: Tuple[int, ...]
    domain: Domain

    def _inner(self, width: int) -> SubDomain:
        return SubDomain(tuple(l + width * s for l, s in zip(self.sub.lo, self.support)),
                         tuple(h - width * s for h, s in zip(self.sub.hi, self.support)))

    @property
    def halo(self) -> SubDomain:
        return self.sub.expand(self.support).clip(self.domain)

    @property
    def border(self) -> List[SubDomain]:
        return _rim_boxes(self.sub, self._inner(1))

    @property
    def extended_border(self) -> List[SubDomain]:
        return _rim_boxes(self.sub, self._inner(2))

    @property
    def extension(self) -> List[SubDomain]:
        return _rim_boxes(self.halo, self.sub)

    def _in_rim(self, position: Sequence[int], width: int) -> bool:
        if not self.sub.contains(position):
            return False
        return any(p < l + width * s or p >= h - width * s
                   for p, l, h, s in zip(position, self.sub.lo, self.sub.hi, self.support))

    def in_border(self, position: Sequence[int]) -> bool:
        return self._in_rim(position, 1)

    def in_extended_border(self, position: Sequence[int]) -> bool:
        return self._in_rim(position, 2)

    def in_extension(self, position: Sequence[int]) -> bool:
        return (self.domain.contains(position) and not self.sub.contains(position)
                and self.halo.contains(position))

    def to_dict(self):
        return {
            'sub_domain': self.sub.to_dict(),
            'border': [b.to_dict() for b in self.border],
            'extension': [b.to_dict() for b in self.extension],
        }


def border_geometry(sub: SubDomain, support: Sequence[int], domain: Domain) -> BorderGeometry:
    return BorderGeometry(sub, tuple(int(l) for l in support), domain)


@dataclass(frozen=True)
class UpdateMessage:
    """Coordinate update (k0, w0, dZ) broadcast to neighbors, with the committed value"""
    k: int
    position: Tuple[int, ...]
    dz: float
    z_new: float
    origin: int
    seq: int

    def to_dict(self):
        return {'k': self.k, 'position': list(self.position), 'dz': self.dz,
                'z_new': self.z_new, 'origin': self.origin, 'seq': self.seq}


def notify_set(position: Sequence[int], grid: WorkerGrid,
               origin: Optional[int] = None) -> Set[int]:
    """Workers w' != origin whose S_w' u E_L(S_w') meets V(w0)"""
    if origin is None:
        origin = grid.owner(position)
    nb = neighborhood(position, grid.support)
    targets = set()
    for w in grid.neighbors(origin):
        if nb.overlaps(grid.halo(w)):
            targets.add(w)
    return targets


def soft_lock_check(magnitude: float, competitors: Iterable[Tuple[float, int]],
                    worker: int, in_border: bool = True) -> bool:
    """
    Soft-lock acceptance of a candidate move

    Args:
        magnitude: |dZ| of the candidate
        competitors: (|dZ|, owner) pairs over [1, K] x (V(w0) n E_L(S_w))
        worker: index of the worker holding the candidate
        in_border: False skips the check (interior candidates are always accepted)

    Returns:
        True when the candidate may be committed
    """
    if not in_border:
        return True
    for other, owner in competitors:
        if other > magnitude:
            return False
        # ties go to the lowest worker index
        if other == magnitude and owner < worker:
            return False
    return True


class CrossCorrelationCache:
    """Atom pair cross-correlations, computed on first use"""

    def __init__(self, D: Dictionary):
        self.D = D
        self._pairs: Dict[Tuple[int, int], np.ndarray] = {}

    def get(self, k0: int, k: int) -> np.ndarray:
        key = (k0, k)
        if key not in self._pairs:
            self._pairs[key] = pair_cross_correlation(self.D.values[k0], self.D.values[k])
        return self._pairs[key]


def interference_delta(updates: Sequence[Tuple[int, Sequence[int], float]], D: Dictionary,
                       cache: Optional[CrossCorrelationCache] = None) -> float:
    """
    Cross term between simultaneous updates, summed over unordered pairs

    The objective decrease of applying all updates at once is
    sum of individual cost_delta - interference_delta.
    """
    cache = cache or CrossCorrelationCache(D)
    support = D.support.sizes
    total = 0.0
    for i, (k_i, pos_i, dz_i) in enumerate(updates):
        for k_j, pos_j, dz_j in updates[i + 1:]:
            shift = [pj - pi for pi, pj in zip(pos_i, pos_j)]
            if any(abs(s) >= l for s, l in zip(shift, support)):
                continue
            idx = tuple(s + l - 1 for s, l in zip(shift, support))
            total += float(cache.get(k_i, k_j)[idx]) * dz_i * dz_j
    return total


def acceptance_bound_from_counts(sizes: Sequence[float], counts: Sequence[float],
                                 support: Sequence[float]) -> float:
    """prod_i (1 - W_i L_i / T_i), real-valued counts allowed, clamped to [0, 1]"""
    bound = 1.0
    for t, w, l in zip(sizes, counts, support):
        factor = 1.0 - w * l / t
        if factor <= 0:
            logger.warning(f"W_i L_i = {w * l} >= T_i = {t}: acceptance bound clamps to 0")
            return 0.0
        bound *= factor
    return min(bound, 1.0)


def acceptance_bound(grid: WorkerGrid) -> float:
    """Lower bound on the probability that a uniformly placed candidate is accepted"""
    return acceptance_bound_from_counts(grid.domain.sizes, grid.counts, grid.support)


def half_acceptance_counts(sizes: Sequence[int], support: Sequence[int]) -> Tuple[float, ...]:
    """Per-axis worker counts at which the acceptance bound reaches 1/2"""
    d = len(sizes)
    root = 2.0 ** (1.0 / d)
    return tuple(t / l * (root - 1.0) / root for t, l in zip(sizes, support))


def snake_order(counts: Sequence[int]) -> List[Tuple[int, ...]]:
    """Boustrophedon path over grid coordinates; consecutive entries are grid-adjacent"""
    if len(counts) == 1:
        return [(i,) for i in range(counts[0])]
    inner = snake_order(counts[1:])
    path = []
    for i in range(counts[0]):
        seq = inner if i % 2 == 0 else inner[::-1]
        path.extend((i,) + c for c in seq)
    return path


def token_path(grid: WorkerGrid) -> List[int]:
    return [grid.index(c) for c in snake_order(grid.counts)]


def dump_grid(grid: WorkerGrid, path: Optional[Path] = None) -> dict:
    """Grid layout with every worker's border geometry, optionally written as JSON"""
    layout = grid.to_dict()
    layout['acceptance_bound'] = acceptance_bound(grid)
    layout['workers'] = []
    for w in range(grid.n_workers):
        geom = border_geometry(grid.sub_domain(w), grid.support, grid.domain)
        entry = {'id': w, 'coords': list(grid.coords(w)), 'neighbors': grid.neighbors(w)}
        entry.update(geom.to_dict())
        layout['workers'].append(entry)
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(layout, f, indent=2)
        logger.info(f"Grid layout written to {path}")
    return layout
