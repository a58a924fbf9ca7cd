"""
Benchmarks - coordinate selection strategies and worker scaling on synthetic presets
"""
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Sequence

import numpy as np
from tqdm import tqdm

from .csc_solver import SelectionStrategy, default_tolerance, solve
from .dist_runtime import RuntimeOptions, run_dicodile_z
from .exceptions import ConfigError, DivergenceError, GridError
from .grid_protocol import make_grid, max_feasible_workers
from .synthetic import generate_corner_image, generate_synthetic, get_preset
from .tensor_core import Domain, lambda_max, objective

logger = logging.getLogger(__name__)

MIN_REPEATS = 3
REG_FRACTION = 0.1
# Strategies are compared at a tenth of the default stopping tolerance
BENCH_TOL_FACTOR = 0.1

SPLIT_ALIASES = {'grid': 'auto', 'auto': 'auto', 'line': '1d', '1d': '1d'}


@dataclass
class BenchResult:
    """Runs of one benchmark scenario"""
    scenario: str
    runs: List[Dict[str, Any]] = field(default_factory=list)
    skipped: List[Dict[str, Any]] = field(default_factory=list)
    meta: Dict[str, Any] = field(default_factory=dict)

    def add(self, **run):
        self.runs.append(run)

    def groups(self, key: str) -> Dict[Any, List[Dict[str, Any]]]:
        grouped: Dict[Any, List[Dict[str, Any]]] = {}
        for run in self.runs:
            grouped.setdefault(run[key], []).append(run)
        return grouped

    def mean(self, key: str, metric: str = 'runtime') -> Dict[Any, float]:
        """Mean of `metric` per value of `key`; groups under MIN_REPEATS are flagged"""
        means = {}
        for value, runs in self.groups(key).items():
            if len(runs) < MIN_REPEATS:
                logger.warning(f"{self.scenario}: only {len(runs)} repeats for {key}={value}")
            means[value] = float(np.mean([r[metric] for r in runs]))
        return means

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _strategy(name) -> SelectionStrategy:
    try:
        return SelectionStrategy(name)
    except ValueError:
        raise ConfigError(f"Unknown strategy '{name}'. "
                          f"Available: {[s.value for s in SelectionStrategy]}")


def bench_strategies(preset: str = '1d-tiny', workers: int = 1, repeats: int = 5,
                     strategies: Sequence[str] = ('greedy', 'randomized', 'lgcd'),
                     seed: int = 0, show_progress: bool = True,
                     **overrides) -> BenchResult:
    """
    Greedy, randomized and locally greedy coordinate descent to the same tolerance

    Each repeat draws a new synthetic signal and encodes it with the true
    dictionary at lambda = 0.1 lambda_max. With workers > 1 the locally greedy
    runs go through the distributed runtime. The largest relative objective gap
    between strategies on the same repeat is kept in meta['objective_spread'].
    """
    result = BenchResult(f"strategies-{preset}", meta={'preset': preset, 'workers': workers})
    for r in tqdm(range(repeats), desc="strategies", disable=not show_progress):
        spec = get_preset(preset, seed=seed + r, **overrides)
        X, D, _ = generate_synthetic(spec)
        lmbd = REG_FRACTION * lambda_max(X, D)
        tol = BENCH_TOL_FACTOR * default_tolerance(D, lmbd)
        for name in strategies:
            strategy = _strategy(name)
            if strategy is SelectionStrategy.LOCALLY_GREEDY and workers > 1:
                grid = make_grid(X.domain, workers, D.support.sizes)
                z_hat, stats = run_dicodile_z(X, D, lmbd, grid, tol, RuntimeOptions(seed=seed + r))
                result.add(repeat=r, strategy=strategy.value, workers=workers,
                           runtime=stats.t_sec, objective=stats.objective,
                           converged=stats.converged, n_iter=stats.iterations,
                           scanned=stats.scanned, accepted=stats.accepted,
                           soft_locked=stats.soft_locked, messages=stats.messages)
                continue
            z_hat, log = solve(X, D, lmbd, strategy, tol=tol, seed=seed + r)
            if not log.converged:
                logger.warning(f"{strategy.value} did not converge on repeat {r}")
            result.add(repeat=r, strategy=strategy.value, workers=1,
                       runtime=log.runtime, objective=objective(X, z_hat, D, lmbd),
                       converged=log.converged, n_iter=log.n_iter, scanned=log.n_scanned,
                       accepted=log.n_updates, soft_locked=0, messages=0)
    means = result.mean('strategy')
    spreads = [np.ptp([r['objective'] for r in runs]) / max(abs(runs[0]['objective']), 1e-12)
               for runs in result.groups('repeat').values()]
    result.meta['objective_spread'] = float(max(spreads, default=0.0))
    logger.info("Mean runtime per strategy: " +
                ", ".join(f"{k}={v:.3f}s" for k, v in means.items()))
    return result


def iteration_cost(preset: str = '1d-tiny', length_factors: Sequence[int] = (16, 64),
                   strategies: Sequence[str] = ('greedy', 'lgcd'), seed: int = 0,
                   **overrides) -> BenchResult:
    """
    Coordinates scanned per iteration for signals of length factor x L

    Greedy rescans the whole domain at every iteration, so its cost grows with
    T, while a locally greedy iteration only scans one cell.
    """
    base = get_preset(preset, **overrides)
    if len(base.sizes) != 1:
        raise ConfigError("Iteration cost is measured on 1D presets")
    result = BenchResult(f"iteration-cost-{preset}", meta={'preset': preset})
    for factor in length_factors:
        spec = replace(base, sizes=(factor * base.support[0],), seed=seed)
        X, D, _ = generate_synthetic(spec)
        lmbd = REG_FRACTION * lambda_max(X, D)
        for name in strategies:
            z_hat, log = solve(X, D, lmbd, _strategy(name), tol=default_tolerance(D, lmbd), seed=seed)
            per_iter = log.n_scanned / max(log.n_iter, 1)
            result.add(length_factor=factor, strategy=name, n_iter=log.n_iter,
                       scanned=log.n_scanned, cost=per_iter,
                       runtime=log.runtime, time_per_iter=log.runtime / max(log.n_iter, 1))
    return result


def bench_scaling(preset: str = '2d-tiny', W_list: Sequence[int] = (1, 4, 9),
                  split: str = 'grid', repeats: int = 5, scheduler: str = 'deterministic',
                  soft_lock: bool = True, seed: int = 0, show_progress: bool = True,
                  **overrides) -> BenchResult:
    """
    Distributed coding runtime against the number of workers

    Worker counts without a valid grid are skipped with the reason and the
    largest feasible count for the split mode.
    """
    if split not in SPLIT_ALIASES:
        raise ConfigError(f"Unknown split '{split}'. Use 'grid' or 'line'")
    mode = SPLIT_ALIASES[split]
    spec = get_preset(preset, **overrides)
    result = BenchResult(f"scaling-{preset}-{split}", meta={'preset': preset, 'split': split})

    X, D, _ = generate_synthetic(spec)
    result.meta['max_feasible'] = max_feasible_workers(X.domain, D.support.sizes, mode)
    lmbd = REG_FRACTION * lambda_max(X, D)
    tol = default_tolerance(D, lmbd)

    for n_workers in W_list:
        try:
            grid = make_grid(X.domain, n_workers, D.support.sizes, mode)
        except GridError as e:
            logger.warning(f"Skipping W={n_workers}: {e}")
            result.skipped.append({'workers': n_workers, 'reason': str(e),
                                   'max_feasible': e.max_feasible})
            continue
        for r in tqdm(range(repeats), desc=f"W={n_workers}", disable=not show_progress):
            options = RuntimeOptions(scheduler=scheduler, seed=seed + r, soft_lock=soft_lock)
            try:
                _, stats = run_dicodile_z(X, D, lmbd, grid, tol, options)
            except DivergenceError as e:
                logger.warning(f"W={n_workers} repeat {r} diverged on workers {e.workers}")
                result.add(repeat=r, workers=n_workers, grid=list(grid.counts), runtime=np.nan,
                           objective=np.nan, converged=False, diverged=True,
                           accepted=0, soft_locked=0, messages=0)
                continue
            result.add(repeat=r, workers=n_workers, grid=list(grid.counts), runtime=stats.t_sec,
                       wall=stats.wall_sec, objective=stats.objective, converged=stats.converged,
                       diverged=False, accepted=stats.accepted, soft_locked=stats.soft_locked,
                       messages=stats.messages, acceptance_rate=stats.acceptance_rate)
    return result


def bench_soft_lock(preset: str = '2d-tiny', workers: int = 49, seeds: int = 10,
                    seed: int = 0, show_progress: bool = True, **overrides) -> BenchResult:
    """
    Divergence guard trips with and without soft-locks

    The image concentrates its energy at grid corners shared by 2^d workers
    (see `generate_corner_image`), one noise draw per seed. Each draw is coded
    with soft-locks off then on; meta['trip_rate'] maps the mode to the share of
    runs aborted by the divergence guard.
    """
    spec = get_preset(preset, **overrides)
    grid = make_grid(Domain(spec.sizes), workers, spec.support)
    result = BenchResult(f"soft-lock-{preset}",
                         meta={'preset': preset, 'workers': workers, 'grid': list(grid.counts)})
    for s in tqdm(range(seeds), desc="soft-lock", disable=not show_progress):
        X, D = generate_corner_image(grid, seed=seed + s)
        lmbd = REG_FRACTION * lambda_max(X, D)
        tol = default_tolerance(D, lmbd)
        for soft_lock in (False, True):
            options = RuntimeOptions(seed=seed + s, soft_lock=soft_lock)
            try:
                _, stats = run_dicodile_z(X, D, lmbd, grid, tol, options)
                diverged = False
            except DivergenceError as e:
                stats, diverged = e.stats, True
            result.add(seed=seed + s, soft_lock=soft_lock, diverged=diverged,
                       rounds=stats.rounds, runtime=stats.t_sec,
                       objective=np.nan if diverged else stats.objective,
                       accepted=stats.accepted, soft_locked=stats.soft_locked)
    result.meta['trip_rate'] = {
        'soft_lock' if mode else 'no_soft_lock': float(np.mean([r['diverged'] for r in runs]))
        for mode, runs in result.groups('soft_lock').items()
    }
    logger.info(f"Divergence guard trip rate: {result.meta['trip_rate']}")
    return result


def compare_splits(preset: str = '2d-tiny', **overrides) -> Dict[str, int]:
    """Largest feasible worker count of the line and grid splits"""
    spec = get_preset(preset, **overrides)
    domain, support = Domain(spec.sizes), spec.support
    return {
        'line': max_feasible_workers(domain, support, '1d'),
        'grid': max_feasible_workers(domain, support, 'auto'),
    }
