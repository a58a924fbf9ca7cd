"""
Oracles - brute force cross-checks of the closed forms used by the solvers

    check_cost_delta          single update decrease vs direct objective difference
    check_interference        simultaneous updates: sum of decreases minus interference
    estimate_acceptance       Monte-Carlo acceptance rate of the soft-lock arbitration
    enumerate_j_omega         number of sub-domains each neighbourhood touches
    check_lasso_equivalence   sparse coding vs a dense LASSO with an explicit design matrix
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.linear_model import Lasso
from sklearn.utils import check_random_state
from tqdm import tqdm

from .csc_solver import (
    CandidateUpdate, SelectionStrategy, apply_update, cost_delta, init_state, solve,
)
from .grid_protocol import WorkerGrid, acceptance_bound, grid_from_counts, interference_delta
from .synthetic import gaussian_dictionary
from .tensor_core import ActivationMap, Dictionary, Domain, Signal, lambda_max, objective

logger = logging.getLogger(__name__)

DELTA_TOL = 1e-10
LASSO_TOL = 1e-6
MAX_DENSE_SIZE = 2000

# (T, K, L) of the random instances, per dimension
INSTANCE_SHAPES = {
    1: ((40,), 3, (5,)),
    2: ((8, 8), 2, (3, 3)),
}


@dataclass
class OracleReport:
    """Outcome of one oracle over a batch of trials"""
    name: str
    tolerance: float
    trials: int = 0
    max_rel_error: float = 0.0
    instance: Dict[str, Any] = field(default_factory=dict)
    details: Dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)

    def record(self, error: float, instance: Dict[str, Any]):
        """Keep the worst instance for replay"""
        self.trials += 1
        if error >= self.max_rel_error:
            self.max_rel_error = float(error)
            self.instance = instance

    def to_dict(self) -> Dict[str, Any]:
        result = asdict(self)
        result['passed'] = self.passed
        return result

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), default=str)

    def log(self):
        if self.passed:
            logger.info(f"{self.name}: passed ({self.trials} trials, max error {self.max_rel_error:.3e})")
        else:
            logger.error(f"{self.name}: FAILED (max error {self.max_rel_error:.3e} >= {self.tolerance:.1e}), "
                         f"instance: {json.dumps(self.instance, default=str)}")


def random_instance(rng, d: int = 1, sizes: Optional[Tuple[int, ...]] = None,
                    n_atoms: Optional[int] = None, support: Optional[Tuple[int, ...]] = None,
                    channels: int = 1) -> Tuple[Signal, Dictionary, Dict[str, Any]]:
    """Gaussian signal and unit-norm gaussian dictionary, plus a replay descriptor"""
    default_sizes, default_k, default_support = INSTANCE_SHAPES[d]
    sizes = tuple(sizes or default_sizes)
    support = tuple(support or default_support)
    n_atoms = n_atoms or default_k
    seed = int(rng.randint(2 ** 31 - 1))
    local = check_random_state(seed)
    X = Signal(local.randn(*sizes, channels))
    D = gaussian_dictionary(n_atoms, support, channels, local)
    return X, D, {'seed': seed, 'sizes': sizes, 'n_atoms': n_atoms,
                  'support': support, 'channels': channels}


def _random_code(rng, X: Signal, D: Dictionary, density: float = 0.1) -> ActivationMap:
    shape = (D.n_atoms,) + X.domain.sizes
    return ActivationMap((rng.rand(*shape) < density) * rng.randn(*shape))


def _random_position(rng, sizes: Sequence[int]) -> Tuple[int, ...]:
    return tuple(int(rng.randint(t)) for t in sizes)


def check_cost_delta(seed=0, trials: int = 100, dims: Sequence[int] = (1, 2),
                     show_progress: bool = False) -> OracleReport:
    """Closed-form decrease of one update vs E(before) - E(after)"""
    rng = check_random_state(seed)
    report = OracleReport('cost_delta', DELTA_TOL)
    for trial in tqdm(range(trials), desc="cost_delta", disable=not show_progress):
        d = dims[trial % len(dims)]
        X, D, instance = random_instance(rng, d)
        lmbd = float(rng.uniform(0.01, 0.5)) * lambda_max(X, D)
        z_hat, beta = init_state(X, D, _random_code(rng, X, D))
        k = int(rng.randint(D.n_atoms))
        pos = _random_position(rng, X.domain.sizes)
        z_old = float(z_hat.values[(k,) + pos])
        # every tenth trial is the zero update
        z_new = z_old if trial % 10 == 0 else float(z_old + rng.randn())
        update = CandidateUpdate(k, pos, z_old, z_new)

        before = objective(X, z_hat, D, lmbd)
        predicted = cost_delta(update, z_hat, beta, D, lmbd)
        apply_update(z_hat, beta, update, D)
        direct = before - objective(X, z_hat, D, lmbd)
        error = abs(predicted - direct) / max(1.0, abs(direct))
        report.record(error, {**instance, 'lambda': lmbd, 'k': k, 'position': pos,
                              'z_old': z_old, 'z_new': z_new})
    return report


def _update_set(rng, X: Signal, D: Dictionary, z_hat: ActivationMap,
                size: int, overlap: bool) -> List[CandidateUpdate]:
    """Distinct coordinates, clustered inside one atom support when `overlap`"""
    sizes, support = X.domain.sizes, D.support.sizes
    anchor = _random_position(rng, sizes)
    chosen = {}
    while len(chosen) < size:
        k = int(rng.randint(D.n_atoms))
        if overlap:
            pos = tuple(int(np.clip(a + rng.randint(-l + 1, l), 0, t - 1))
                        for a, l, t in zip(anchor, support, sizes))
        else:
            pos = _random_position(rng, sizes)
        if (k, pos) in chosen:
            continue
        z_old = float(z_hat.values[(k,) + pos])
        chosen[(k, pos)] = CandidateUpdate(k, pos, z_old, float(z_old + rng.randn()))
    return list(chosen.values())


def check_interference(seed=0, trials: int = 100, dims: Sequence[int] = (1, 2),
                       show_progress: bool = False) -> OracleReport:
    """
    Sum of single-update decreases minus the interference term vs the
    direct decrease of applying all updates at once
    """
    rng = check_random_state(seed)
    report = OracleReport('interference', DELTA_TOL)
    non_overlap_max = 0.0
    for trial in tqdm(range(trials), desc="interference", disable=not show_progress):
        d = dims[trial % len(dims)]
        X, D, instance = random_instance(rng, d)
        lmbd = float(rng.uniform(0.01, 0.5)) * lambda_max(X, D)
        z_hat, beta = init_state(X, D, _random_code(rng, X, D))
        size = 3 if trial % 4 == 0 else int(rng.randint(2, 6))
        updates = _update_set(rng, X, D, z_hat, size, overlap=trial % 5 != 4)

        before = objective(X, z_hat, D, lmbd)
        singles = sum(cost_delta(u, z_hat, beta, D, lmbd) for u in updates)
        cross = interference_delta([(u.k, u.position, u.dz) for u in updates], D)
        for u in updates:
            apply_update(z_hat, beta, u, D)
        direct = before - objective(X, z_hat, D, lmbd)
        error = abs(singles - cross - direct) / max(1.0, abs(direct))
        report.record(error, {**instance, 'lambda': lmbd,
                              'updates': [(u.k, u.position, u.z_old, u.z_new) for u in updates]})

        far_apart = all(
            any(abs(a - b) >= l for a, b, l in zip(u.position, v.position, D.support.sizes))
            for i, u in enumerate(updates) for v in updates[i + 1:])
        if far_apart:
            non_overlap_max = max(non_overlap_max, abs(cross))
    report.details['max_interference_non_overlapping'] = non_overlap_max
    return report


def estimate_acceptance(grid: WorkerGrid, samples: int = 100_000, seed=0,
                        chunk: int = 10_000) -> Tuple[float, float, float]:
    """
    Monte-Carlo acceptance rate of the soft-lock arbitration

    Every worker draws one candidate uniformly in its sub-domain with a random
    magnitude. A candidate is rejected when another worker's candidate lies in
    its neighbourhood with a larger magnitude (equal magnitudes: lower index wins).

    Returns:
        (rate, bound, sigma) with sigma the standard error of the rate
    """
    rng = check_random_state(seed)
    bound = acceptance_bound(grid)
    n_workers = grid.n_workers
    if n_workers == 1:
        return 1.0, bound, 0.0

    lo = np.array([grid.sub_domain(w).lo for w in range(n_workers)])
    hi = np.array([grid.sub_domain(w).hi for w in range(n_workers)])
    support = np.array(grid.support)
    index = np.arange(n_workers)
    rates = []
    remaining = samples
    while remaining > 0:
        n = min(chunk, remaining)
        remaining -= n
        pos = lo + np.floor(rng.rand(n, n_workers, grid.domain.d) * (hi - lo)).astype(int)
        mag = rng.rand(n, n_workers)
        # close[s, w, v]: candidate v lies in the neighbourhood of candidate w
        close = np.all(np.abs(pos[:, :, None, :] - pos[:, None, :, :]) < support, axis=-1)
        stronger = (mag[:, None, :] > mag[:, :, None]) | (
            (mag[:, None, :] == mag[:, :, None]) & (index[None, :] < index[:, None])[None])
        locked = np.any(close & stronger, axis=-1)
        rates.append(1.0 - locked.mean(axis=1))
    per_sample = np.concatenate(rates)
    rate = float(per_sample.mean())
    sigma = float(per_sample.std(ddof=1) / np.sqrt(len(per_sample))) if len(per_sample) > 1 else 0.0
    return rate, bound, sigma


def check_acceptance(sizes: Sequence[int], counts: Sequence[int], support: Sequence[int],
                     samples: int = 100_000, seed=0) -> OracleReport:
    """Acceptance rate must not fall below the bound by more than 3 sigma"""
    grid = grid_from_counts(Domain(tuple(sizes)), counts, support)
    rate, bound, sigma = estimate_acceptance(grid, samples, seed)
    report = OracleReport(f"acceptance_{'x'.join(map(str, counts))}", 3.0)
    # error in units of sigma below the bound
    shortfall = max(bound - rate, 0.0) / sigma if sigma > 0 else (0.0 if rate >= bound else np.inf)
    report.record(shortfall, {'sizes': list(sizes), 'counts': list(counts),
                              'support': list(support), 'samples': samples, 'seed': seed})
    report.details.update({'rate': rate, 'bound': bound, 'sigma': sigma})
    return report


def enumerate_j_omega(sizes: Sequence[int], counts: Sequence[int],
                      support: Sequence[int]) -> np.ndarray:
    """
    j[w] = number of sub-domains intersecting the neighbourhood ]w - L, w + L[

    Computed from the box geometry alone, per position of the domain.
    """
    grid = grid_from_counts(Domain(tuple(sizes)), counts, support)
    axes = []
    for t, axis_cuts, l in zip(sizes, grid.cuts, support):
        cuts = np.array(axis_cuts)
        pos = np.arange(t)
        # blocks [cuts[b], cuts[b+1][ meeting [pos - l + 1, pos + l - 1]
        meets = (cuts[None, :-1] <= pos[:, None] + l - 1) & (cuts[None, 1:] > pos[:, None] - l + 1)
        axes.append(meets.sum(axis=1))
    j = np.ones(tuple(sizes), dtype=int)
    for axis, per_axis in enumerate(axes):
        shape = [1] * len(sizes)
        shape[axis] = -1
        j = j * per_axis.reshape(shape)
    return j


def dense_design(D: Dictionary, sizes: Sequence[int]) -> np.ndarray:
    """
    Explicit design matrix of the convolution, one column per (k, w)

    Rows index the zero-padded support (T + L - 1) x P in row-major order.
    """
    support = D.support.sizes
    full = tuple(t + l - 1 for t, l in zip(sizes, support))
    n_rows = int(np.prod(full)) * D.channels
    n_cols = D.n_atoms * int(np.prod(sizes))
    design = np.zeros((n_rows, n_cols))
    col = 0
    for k in range(D.n_atoms):
        for pos in np.ndindex(*sizes):
            canvas = np.zeros(full + (D.channels,))
            canvas[tuple(slice(p, p + l) for p, l in zip(pos, support))] = D.values[k]
            design[:, col] = canvas.ravel()
            col += 1
    return design


def dense_lasso(X: Signal, D: Dictionary, lmbd: float, tol: float = 1e-10,
                max_iter: int = 100_000) -> Tuple[np.ndarray, float]:
    """
    Solve the sparse coding problem as a plain LASSO

    Returns:
        (code shaped (K, *T), objective 1/2 ||y - A z||^2 + lmbd ||z||_1)
    """
    sizes = X.domain.sizes
    design = dense_design(D, sizes)
    y = X.padded(D.support.sizes).ravel()
    n_samples = design.shape[0]
    if lmbd >= float(np.max(np.abs(design.T @ y))):
        coef = np.zeros(design.shape[1])
    else:
        # sklearn scales the data term by 1 / n_samples
        model = Lasso(alpha=lmbd / n_samples, fit_intercept=False, tol=tol,
                      max_iter=max_iter, selection='cyclic')
        model.fit(design, y)
        coef = model.coef_
    res = y - design @ coef
    obj = 0.5 * float(res @ res) + lmbd * float(np.sum(np.abs(coef)))
    return coef.reshape((D.n_atoms,) + sizes), obj


def check_lasso_equivalence(seed=0, trials: int = 100, dims: Sequence[int] = (1, 2),
                            show_progress: bool = False) -> OracleReport:
    """Objective of the coordinate descent solver vs the dense LASSO"""
    rng = check_random_state(seed)
    report = OracleReport('lasso_equivalence', LASSO_TOL)
    for trial in tqdm(range(trials), desc="lasso", disable=not show_progress):
        d = dims[trial % len(dims)]
        X, D, instance = random_instance(rng, d)
        if X.domain.size * D.n_atoms > MAX_DENSE_SIZE:
            raise ValueError(f"Instance too large for the dense oracle: {instance}")
        lmax = lambda_max(X, D)
        # every tenth trial sits above lambda_max
        frac = 1.01 if trial % 10 == 0 else float(rng.uniform(0.05, 0.8))
        lmbd = frac * lmax

        z_hat, _ = solve(X, D, lmbd, SelectionStrategy.LOCALLY_GREEDY, tol=1e-12)
        ours = objective(X, z_hat, D, lmbd)
        _, reference = dense_lasso(X, D, lmbd)
        error = abs(ours - reference) / max(abs(reference), 1e-12)
        report.record(error, {**instance, 'lambda_fraction': frac,
                              'ours': ours, 'reference': reference})
    return report


def run_all(seed=0, trials: int = 100, samples: int = 100_000,
            show_progress: bool = True) -> List[OracleReport]:
    """Every oracle at its default settings"""
    reports = [
        check_cost_delta(seed, trials, show_progress=show_progress),
        check_interference(seed, trials, show_progress=show_progress),
        check_lasso_equivalence(seed, trials, show_progress=show_progress),
    ]
    for counts in ((2, 2), (4, 4)):
        reports.append(check_acceptance((512, 512), counts, (16, 16), samples, seed))

    j = enumerate_j_omega((12, 12), (2, 2), (2, 2))
    pattern = OracleReport('j_omega_pattern', 0.5)
    # 2 next to one internal cut, 4 at the crossing
    expected = np.ones((12, 12), dtype=int)
    expected[5:7, :] *= 2
    expected[:, 5:7] *= 2
    pattern.record(float(np.sum(j != expected)), {'sizes': [12, 12], 'counts': [2, 2], 'support': [2, 2]})
    pattern.details['counts'] = {int(v): int(np.sum(j == v)) for v in np.unique(j)}
    reports.append(pattern)

    for report in reports:
        report.log()
    return reports
