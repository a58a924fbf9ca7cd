"""
Learning Orchestrator - alternating minimization for convolutional dictionary learning
Coordinates distributed sparse coding, sufficient statistics, the projected
gradient dictionary step and checkpointing
"""
import json
import logging
import signal
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy import signal as sps
from sklearn.utils import check_random_state
from tqdm import tqdm

from .config_loader import Config
from .dict_optim import LineSearchConfig, dictionary_step
from .dist_runtime import RuntimeOptions, run_dicodile_z
from .exceptions import ConfigError, ConvdlError, NonFiniteError, ShapeError
from .grid_protocol import make_grid
from .signal_io import SignalStore, load_signal
from .synthetic import gaussian_dictionary, recovery_metrics
from .tensor_core import (
    ActivationMap, Dictionary, Signal, check_signal_shapes, lambda_max, objective, residual_full,
)

logger = logging.getLogger(__name__)

_HANDLER_TAG = '_convdl_handler'


def setup_logging(log_dir: Path, level: str = 'INFO') -> Path:
    """
    Configure root logging: DEBUG file handler plus a console handler at `level`

    Returns:
        Path of the log file
    """
    log_dir = Path(log_dir)
    log_dir.mkdir(parents=True, exist_ok=True)
    log_file = log_dir / f"convdl_{datetime.now().strftime('%Y%m%d_%H%M%S')}.log"

    root_logger = logging.getLogger()
    # Replace handlers from an earlier call
    for handler in list(root_logger.handlers):
        if getattr(handler, _HANDLER_TAG, False):
            root_logger.removeHandler(handler)
            handler.close()

    # File handler
    file_handler = logging.FileHandler(log_file, encoding='utf-8')
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    ))

    # Console handler
    console_handler = logging.StreamHandler()
    console_handler.setLevel(getattr(logging, level.upper()))
    console_handler.setFormatter(logging.Formatter(
        '%(levelname)s - %(message)s'
    ))

    for handler in (file_handler, console_handler):
        setattr(handler, _HANDLER_TAG, True)
        root_logger.addHandler(handler)
    root_logger.setLevel(logging.DEBUG)

    logger.info(f"Logging to: {log_file}")
    return log_file


@dataclass
class CdlConfig:
    """Typed configuration of a dictionary learning run"""
    n_atoms: int = 5
    atom_support: Tuple[int, ...] = (8,)
    reg: float = 0.1
    reg_mode: str = 'fraction'        # 'fraction' of lambda_max or 'absolute'
    tol: Optional[float] = None       # sparse coding stopping threshold
    nu: float = 1e-4                  # relative stopping threshold on the cost variation
    max_outer: int = 20
    init_mode: str = 'gaussian'
    seed: Optional[int] = 0
    n_workers: int = 1
    split: str = 'auto'
    scheduler: str = 'deterministic'
    soft_lock: bool = True
    max_iter: int = 1_000_000
    activity: float = 1.0
    timeout: float = 600.0
    divergence_factor: float = 50.0
    resample_unused: bool = False
    n_jobs: int = 1
    show_progress: bool = True
    save_interval: int = 1
    line_search: LineSearchConfig = field(default_factory=LineSearchConfig)

    def __post_init__(self):
        self.atom_support = tuple(int(l) for l in self.atom_support)
        self.validate()

    def validate(self):
        if self.n_atoms < 1:
            raise ConfigError(f"n_atoms must be >= 1, got {self.n_atoms}")
        if self.reg_mode not in ('fraction', 'absolute'):
            raise ConfigError(f"reg_mode must be 'fraction' or 'absolute', got {self.reg_mode}")
        if self.reg_mode == 'fraction' and not 0 < self.reg <= 1:
            raise ConfigError(f"reg fraction must be in ]0, 1], got {self.reg}")
        if self.reg < 0:
            raise ConfigError(f"reg must be >= 0, got {self.reg}")
        if self.nu <= 0:
            raise ConfigError(f"nu must be > 0, got {self.nu}")
        if self.max_outer < 0:
            raise ConfigError(f"max_outer must be >= 0, got {self.max_outer}")
        if self.init_mode not in ('gaussian', 'patches'):
            raise ConfigError(f"init_mode must be 'gaussian' or 'patches', got {self.init_mode}")

    @classmethod
    def from_config(cls, config: Config) -> 'CdlConfig':
        cdl = config.get('cdl')
        runtime = config.get('runtime')
        dictionary = config.get('dictionary')
        return cls(
            n_atoms=int(cdl['n_atoms']),
            atom_support=tuple(cdl['atom_support']),
            reg=float(cdl['reg']),
            reg_mode=cdl['reg_mode'],
            tol=None if cdl['tol'] is None else float(cdl['tol']),
            nu=float(cdl['nu']),
            max_outer=int(cdl['max_outer']),
            init_mode=cdl['init_mode'],
            seed=cdl['seed'],
            n_workers=int(runtime['workers']),
            split=runtime['split'],
            scheduler=runtime['scheduler'],
            soft_lock=bool(runtime['soft_lock']),
            max_iter=int(runtime['max_iter']),
            activity=float(runtime['activity']),
            timeout=float(runtime['timeout']),
            divergence_factor=float(runtime['divergence_factor']),
            resample_unused=bool(cdl['resample_unused']),
            n_jobs=int(dictionary['n_jobs']),
            show_progress=config.show_progress,
            save_interval=int(config.get('progress', 'save_interval', default=1)),
            line_search=LineSearchConfig(
                shrink=float(dictionary['shrink']),
                sufficient_decrease=float(dictionary['sufficient_decrease']),
                max_backtracks=int(dictionary['max_backtracks']),
                max_iter=int(dictionary['max_iter']),
                tol=float(dictionary['tol']),
            ),
        )

    def runtime_options(self, iteration: int = 0) -> RuntimeOptions:
        seed = None if self.seed is None else int(self.seed) + iteration
        return RuntimeOptions(
            scheduler=self.scheduler, seed=seed, soft_lock=self.soft_lock,
            divergence_factor=self.divergence_factor, max_iter=self.max_iter,
            activity=self.activity, timeout=self.timeout,
        )

    def to_dict(self) -> Dict[str, Any]:
        values = asdict(self)
        values['atom_support'] = list(self.atom_support)
        return values


@dataclass
class CdlResult:
    """Outcome of a dictionary learning run"""
    D: Dictionary
    Z: ActivationMap
    trace: List[float]
    lmbd: float
    lmbd_max: float
    n_iter: int = 0
    converged: bool = False
    interrupted: bool = False
    timing: Dict[str, float] = field(default_factory=lambda: {'csc': 0.0, 'stats': 0.0, 'dict': 0.0})
    csc_stats: List[Dict[str, Any]] = field(default_factory=list)
    pgd_logs: List[Dict[str, Any]] = field(default_factory=list)
    resampled: List[List[int]] = field(default_factory=list)

    def summary(self) -> Dict[str, Any]:
        return {
            'n_iter': self.n_iter,
            'converged': self.converged,
            'interrupted': self.interrupted,
            'lambda': self.lmbd,
            'lambda_max': self.lmbd_max,
            'objective': self.trace[-1] if self.trace else None,
            'trace': self.trace,
            'timing': self.timing,
            'n_atoms': self.D.n_atoms,
            'nnz': self.Z.nnz(),
            'resampled': self.resampled,
        }


class CheckpointState:
    """Manage learning progress on disk: D.sig, Z.sig and manifest.json"""

    def __init__(self, directory: Path):
        self.store = SignalStore(directory)

    @property
    def directory(self) -> Path:
        return self.store.root

    def exists(self) -> bool:
        return self.store.read_manifest() is not None

    def save(self, D: Dictionary, z_hat: ActivationMap, trace: List[float], iteration: int,
             lmbd: float, lmbd_max: float, extra: Optional[Dict[str, Any]] = None):
        """Save current state to disk"""
        try:
            self.store.save('D', D)
            self.store.save('Z', z_hat)
            manifest = {
                'version': '1.0',
                'last_saved': datetime.now().isoformat(),
                'iteration': iteration,
                'trace': trace,
                'lambda': lmbd,
                'lambda_max': lmbd_max,
            }
            if extra:
                manifest.update(extra)
            self.store.write_manifest(manifest)
            logger.debug(f"Checkpoint saved: iteration {iteration}")
        except OSError as e:
            logger.error(f"Failed to save checkpoint: {e}")

    def load(self) -> Optional[Dict[str, Any]]:
        """Load an existing checkpoint, None when absent or unreadable"""
        manifest = self.store.read_manifest()
        if manifest is None:
            return None
        try:
            state = dict(manifest)
            state['D'] = self.store.load('D', expected_kind='dictionary')
            state['Z'] = self.store.load('Z', expected_kind='activation')
        except (ConvdlError, OSError) as e:
            logger.warning(f"Could not load checkpoint: {e}. Starting fresh.")
            return None
        logger.info(f"Loaded checkpoint: iteration {state['iteration']}")
        return state


def init_dictionary(X: Signal, n_atoms: int, support: Tuple[int, ...],
                    mode: str = 'gaussian', seed=None) -> Dictionary:
    """
    Initial dictionary

    Args:
        X: training signal
        n_atoms: K
        support: atom support L
        mode: 'gaussian' (unit-norm normal atoms) or 'patches' (random patches of X)
        seed: random seed

    Raises:
        ShapeError: the support does not fit or fewer than K patches exist
    """
    support = tuple(int(l) for l in support)
    if len(support) != X.domain.d or any(l > t for l, t in zip(support, X.domain.sizes)):
        raise ShapeError(f"Atom support {support} does not fit in {X.domain.sizes}",
                         expected=X.domain.sizes, actual=support)
    rng = check_random_state(seed)
    if mode == 'gaussian':
        return gaussian_dictionary(n_atoms, support, X.channels, rng)
    if mode != 'patches':
        raise ConfigError(f"Unknown init mode '{mode}'")

    valid = tuple(t - l + 1 for t, l in zip(X.domain.sizes, support))
    n_positions = int(np.prod(valid))
    if n_positions < n_atoms:
        raise ShapeError(f"Only {n_positions} patches available for {n_atoms} atoms",
                         expected=n_atoms, actual=n_positions)
    picks = rng.choice(n_positions, size=n_atoms, replace=False)
    atoms = np.empty((n_atoms,) + support + (X.channels,))
    for k, flat in enumerate(picks):
        pos = np.unravel_index(int(flat), valid)
        patch = X.values[tuple(slice(p, p + l) for p, l in zip(pos, support))]
        norm = np.linalg.norm(patch)
        if norm == 0:
            logger.warning(f"Patch at {tuple(int(p) for p in pos)} is zero, atom {k} drawn at random")
            patch = rng.randn(*patch.shape)
            norm = np.linalg.norm(patch)
        atoms[k] = patch / norm
    return Dictionary(atoms)


def resample_unused_atoms(X: Signal, z_hat: ActivationMap, D: Dictionary) -> Tuple[Dictionary, List[int]]:
    """Replace atoms with ||Z_k||_1 = 0 by the worst reconstructed patches"""
    unused = [k for k in range(D.n_atoms) if not np.any(z_hat.values[k])]
    if not unused:
        return D, []
    support = D.support.sizes
    res = residual_full(X, z_hat, D)
    energy = np.sum(res * res, axis=-1)
    # patch energy at every position where a full patch starts
    windows = sps.fftconvolve(energy, np.ones(support), mode='valid')
    values = D.values.copy()
    for k in unused:
        pos = np.unravel_index(int(np.argmax(windows)), windows.shape)
        patch = res[tuple(slice(p, p + l) for p, l in zip(pos, support))]
        norm = np.linalg.norm(patch)
        if norm == 0:
            break
        values[k] = patch / norm
        windows[tuple(slice(max(p - l + 1, 0), p + l) for p, l in zip(pos, support))] = -np.inf
    logger.info(f"Resampled unused atoms {unused}")
    return Dictionary(values), unused


def fit(X: Signal, cfg: CdlConfig, D0: Optional[Dictionary] = None,
        checkpoint: Optional[CheckpointState] = None,
        should_stop: Optional[Callable[[], bool]] = None,
        D_ref: Optional[Dictionary] = None, resume: bool = True) -> CdlResult:
    """
    Alternate distributed sparse coding and the dictionary step

    Stops when |E_q - E_q+1| < nu max(1, E_q) or after cfg.max_outer iterations.

    Args:
        X: training signal
        cfg: learning configuration
        D0: optional initial dictionary (overrides cfg.init_mode)
        checkpoint: resume from and save to this checkpoint
        should_stop: polled between outer iterations (graceful shutdown)
        D_ref: optional ground truth dictionary, only used for logging recovery
        resume: load the checkpoint state when one exists (it is still saved to)

    Returns:
        CdlResult

    Raises:
        DivergenceError: the sparse coding run aborted
        NonFiniteError: the objective became NaN or Inf
    """
    start_iter = 0
    resumed = checkpoint.load() if checkpoint is not None and resume else None
    if resumed is not None:
        D, z_hat = resumed['D'], resumed['Z']
        trace = list(resumed['trace'])
        lmbd, lmbd_max = resumed['lambda'], resumed['lambda_max']
        start_iter = int(resumed['iteration'])
        logger.info(f"Resuming from checkpoint: {start_iter} outer iterations already done")
    else:
        D = D0.copy() if D0 is not None else init_dictionary(
            X, cfg.n_atoms, cfg.atom_support, cfg.init_mode, cfg.seed)
        check_signal_shapes(X, D)
        # lambda_max is frozen at the initial dictionary
        lmbd_max = lambda_max(X, D)
        lmbd = cfg.reg * lmbd_max if cfg.reg_mode == 'fraction' else cfg.reg
        z_hat = ActivationMap.zeros(X.domain, D.n_atoms)
        trace = [objective(X, z_hat, D, lmbd)]

    result = CdlResult(D=D, Z=z_hat, trace=trace, lmbd=lmbd, lmbd_max=lmbd_max, n_iter=start_iter)
    if start_iter >= cfg.max_outer:
        return result

    grid = make_grid(X.domain, cfg.n_workers, D.support.sizes, cfg.split)
    logger.info(f"CDL: K={D.n_atoms}, L={D.support.sizes}, lambda={lmbd:.4e} "
                f"({lmbd / lmbd_max if lmbd_max else 0:.3f} lambda_max), grid {grid.counts}")

    iterations = range(start_iter, cfg.max_outer)
    pbar = tqdm(iterations, desc="CDL", unit="iter", disable=not cfg.show_progress)
    for q in pbar:
        if should_stop is not None and should_stop():
            logger.warning("Stop requested. Saving progress and exiting...")
            result.interrupted = True
            break

        t0 = time.perf_counter()
        warm = z_hat if z_hat.nnz() else None
        z_hat, run_stats = run_dicodile_z(X, D, lmbd, grid, cfg.tol, cfg.runtime_options(q), warm)
        result.timing['csc'] += time.perf_counter() - t0
        result.csc_stats.append(run_stats.to_dict())
        if not run_stats.converged:
            logger.warning(f"Iteration {q}: sparse coding stopped before convergence")

        if cfg.resample_unused:
            D, resampled = resample_unused_atoms(X, z_hat, D)
            result.resampled.append(resampled)

        D, pgd_log, timing = dictionary_step(z_hat, X, D, grid, cfg.line_search, cfg.n_jobs)
        result.timing['stats'] += timing['stats']
        result.timing['dict'] += timing['dict']
        result.pgd_logs.append(pgd_log.to_dict())

        obj = pgd_log.final_objective + lmbd * z_hat.l1()
        if not np.isfinite(obj):
            raise NonFiniteError(f"Objective became {obj} at iteration {q}")
        prev = trace[-1]
        trace.append(obj)
        result.n_iter = q + 1
        pbar.set_postfix(objective=f"{obj:.4e}", nnz=z_hat.nnz())
        logger.debug(f"Iteration {q}: objective {obj:.6e}, nnz={z_hat.nnz()}, "
                     f"PGD steps={pgd_log.n_steps}")

        converged = abs(prev - obj) < cfg.nu * max(1.0, prev)
        last = converged or q + 1 == cfg.max_outer
        if checkpoint is not None and (last or (q + 1) % max(cfg.save_interval, 1) == 0):
            checkpoint.save(D, z_hat, trace, q + 1, lmbd, lmbd_max)
        if converged:
            result.converged = True
            logger.info(f"Converged after {q + 1} outer iterations")
            break
    pbar.close()

    if result.interrupted and checkpoint is not None:
        checkpoint.save(D, z_hat, trace, result.n_iter, lmbd, lmbd_max)

    result.D, result.Z, result.trace = D, z_hat, trace
    if D_ref is not None:
        metrics = recovery_metrics(X, z_hat, D, D_ref)
        logger.info(f"Recovery: relative error {metrics.relative_error:.4f}, "
                    f"atom score {metrics.atom_score:.4f}")
    return result


class LearningOrchestrator:
    """Main orchestrator for a dictionary learning run"""

    def __init__(self, config: Config, setup_log: bool = True):
        """
        Initialize orchestrator

        Args:
            config: Configuration object
            setup_log: configure file and console logging
        """
        self.config = config
        self.cfg = CdlConfig.from_config(config)
        self.shutdown_requested = False
        self.result: Optional[CdlResult] = None

        if setup_log:
            setup_logging(config.log_dir, config.log_level)

        self.checkpoint = CheckpointState(config.checkpoint_dir)

        # Register signal handlers for graceful shutdown
        signal.signal(signal.SIGINT, self._signal_handler)
        signal.signal(signal.SIGTERM, self._signal_handler)

        logger.info("Learning pipeline initialized")

    def _signal_handler(self, signum, frame):
        """Handle shutdown signals (Ctrl+C)"""
        logger.warning("Shutdown signal received. Saving progress...")
        self.shutdown_requested = True

    def run_learning(self, X: Optional[Signal] = None, D0: Optional[Dictionary] = None,
                     resume: bool = True) -> Dict[str, Any]:
        """
        Run the full learning pipeline

        Returns:
            {'status': 'success', ...} or {'status': 'error', 'message': ...}
        """
        start_time = time.time()

        try:
            # Step 1: Load data
            logger.info("=" * 60)
            logger.info("STEP 1: Loading signal")
            logger.info("=" * 60)

            if X is None:
                if self.config.input_path is None:
                    return {'status': 'error', 'message': 'No input signal configured'}
                X = load_signal(self.config.input_path)
            logger.info(f"Signal: domain {X.domain.sizes}, {X.channels} channel(s)")

            # Step 2: Checkpoint
            logger.info("\n" + "=" * 60)
            logger.info("STEP 2: Initializing learning state")
            logger.info("=" * 60)

            if resume and self.checkpoint.exists():
                logger.info(f"Resuming from checkpoint in {self.checkpoint.directory}")
            else:
                logger.info("Starting from a fresh dictionary")

            # Step 3: Learn
            logger.info("\n" + "=" * 60)
            logger.info("STEP 3: Alternating minimization")
            logger.info("=" * 60)

            self.result = fit(X, self.cfg, D0, self.checkpoint,
                              should_stop=lambda: self.shutdown_requested, resume=resume)

            # Step 4: Summary
            logger.info("\n" + "=" * 60)
            logger.info("STEP 4: Learning complete")
            logger.info("=" * 60)

            elapsed = time.time() - start_time
            summary = self.result.summary()
            logger.info(f"Finished in {elapsed:.1f}s: {summary['n_iter']} outer iterations, "
                        f"objective {summary['objective']:.6e}, converged={summary['converged']}")
            for phase, seconds in summary['timing'].items():
                logger.info(f"   {phase}: {seconds:.2f}s")

            return {
                'status': 'success',
                'result': self.result,
                'statistics': summary,
                'elapsed_time': elapsed,
            }

        except ConvdlError:
            raise
        except Exception as e:
            logger.error(f"Learning failed with error: {e}", exc_info=True)
            return {'status': 'error', 'message': str(e)}

    def export_results(self, output_path: Optional[Path] = None) -> Path:
        """
        Export the learned dictionary, activations and summary

        Args:
            output_path: Optional custom JSON summary path

        Returns:
            Path to the JSON summary
        """
        if self.result is None:
            raise ConvdlError("Nothing to export: run_learning has not completed")
        if output_path is None:
            timestamp = datetime.now().strftime('%Y%m%d_%H%M%S')
            output_path = self.config.output_dir / f'learning_results_{timestamp}.json'
        output_path = Path(output_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)

        store = SignalStore(output_path.parent)
        store.save(f"{output_path.stem}_D", self.result.D)
        store.save(f"{output_path.stem}_Z", self.result.Z)

        export_data = {
            'metadata': {
                'generated_at': datetime.now().isoformat(),
                'config': self.cfg.to_dict(),
            },
            'statistics': self.result.summary(),
            'csc_runs': self.result.csc_stats,
            'pgd': self.result.pgd_logs,
        }
        export_data['metadata']['config'].pop('line_search', None)
        with open(output_path, 'w', encoding='utf-8') as f:
            json.dump(export_data, f, indent=2, default=str)

        logger.info(f"Results exported to: {output_path}")
        return output_path

