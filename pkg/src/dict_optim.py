"""
Dictionary update from sufficient statistics

phi[k, k', t] = sum_w Z_k[w] Z_k'[w + t] over lags t in ]-L, L[
psi[k, tau, p] = sum_w Z_k[w] X[w + tau, p] over tau in Theta

Both are computed per worker sub-domain and summed; the gradient and the data
fit then cost nothing that depends on the signal size.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy import signal as sps
from sklearn.utils import check_random_state

from .exceptions import ConfigError, ShapeError
from .grid_protocol import WorkerGrid
from .tensor_core import FFT_THRESHOLD, ActivationMap, Dictionary, Signal, select_method

logger = logging.getLogger(__name__)

# Above this density the partial statistics use dense correlations
SPARSE_DENSITY = 0.05


@dataclass
class GramPhi:
    """Activation auto/cross-correlations, shaped (K, K, *(2L - 1))"""
    values: np.ndarray

    @property
    def n_atoms(self) -> int:
        return self.values.shape[0]

    @property
    def support(self) -> Tuple[int, ...]:
        return tuple((s + 1) // 2 for s in self.values.shape[2:])

    def is_symmetric(self, atol: float = 1e-10) -> bool:
        """phi[k, k', t] == phi[k', k, -t]"""
        flipped = self.values[(slice(None), slice(None)) + (slice(None, None, -1),) * len(self.support)]
        return bool(np.allclose(self.values, np.swapaxes(flipped, 0, 1), rtol=0, atol=atol))


@dataclass
class CrossPsi:
    """Activation/signal correlations on Theta, shaped (K, *L, P), with ||X||^2"""
    values: np.ndarray
    x_sqnorm: float = 0.0


@dataclass
class LineSearchConfig:
    """Armijo backtracking parameters of the projected gradient descent"""
    initial_step: Optional[float] = None   # default 1 / ||phi *||
    shrink: float = 0.5
    sufficient_decrease: float = 1e-4
    max_backtracks: int = 30
    max_iter: int = 50
    tol: float = 1e-8
    power_iterations: int = 20

    def __post_init__(self):
        if not 0 < self.shrink < 1:
            raise ConfigError(f"shrink must be in ]0, 1[, got {self.shrink}")
        if not 0 < self.sufficient_decrease < 1:
            raise ConfigError(f"sufficient_decrease must be in ]0, 1[, got {self.sufficient_decrease}")
        if self.max_backtracks < 1 or self.max_iter < 0:
            raise ConfigError("max_backtracks must be >= 1 and max_iter >= 0")


@dataclass
class PgdLog:
    """Accepted steps of one pgd_update call"""
    steps: List[Dict[str, float]] = field(default_factory=list)
    stalled: bool = False
    initial_objective: float = 0.0
    final_objective: float = 0.0
    lipschitz: float = 0.0

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'n_steps': self.n_steps,
            'stalled': self.stalled,
            'initial_objective': self.initial_objective,
            'final_objective': self.final_objective,
            'lipschitz': self.lipschitz,
            'steps': self.steps,
        }


def _partial_stats(z: np.ndarray, z_halo: np.ndarray, x_win: np.ndarray,
                   support: Tuple[int, ...]) -> Tuple[np.ndarray, np.ndarray]:
    """
    phi and psi contributions of the activations z owned by one worker

    Args:
        z: owned activations (K, *S)
        z_halo: activations on S grown by L - 1 on every side, zero outside Omega
        x_win: zero-padded signal on [lo, hi + L - 1[, shaped (*(S + L - 1), P)
    """
    n_atoms = z.shape[0]
    phi = np.zeros((n_atoms, n_atoms) + tuple(2 * l - 1 for l in support))
    psi = np.zeros((n_atoms,) + tuple(support) + (x_win.shape[-1],))
    nnz = np.count_nonzero(z)
    if nnz == 0:
        return phi, psi

    if nnz <= SPARSE_DENSITY * z.size:
        for idx in np.argwhere(z):
            k, pos = int(idx[0]), tuple(int(i) for i in idx[1:])
            value = z[(k,) + pos]
            # halo index of w - L + 1 equals the owned index w
            lag = tuple(slice(p, p + 2 * l - 1) for p, l in zip(pos, support))
            phi[k] += value * z_halo[(slice(None),) + lag]
            win = tuple(slice(p, p + l) for p, l in zip(pos, support))
            psi[k] += value * x_win[win]
        return phi, psi

    for k in range(n_atoms):
        if not np.any(z[k]):
            continue
        for k2 in range(n_atoms):
            phi[k, k2] = sps.correlate(z_halo[k2], z[k], mode='valid')
        psi[k] = sps.correlate(x_win, z[k][..., None], mode='valid')
    return phi, psi


def compute_stats(z_hat: ActivationMap, X: Signal, grid: WorkerGrid,
                  n_jobs: int = 1) -> Tuple[GramPhi, CrossPsi]:
    """
    Map-reduce computation of (phi, psi) over the worker grid

    Each worker reads Z on its sub-domain grown by L - 1 and X on its
    sub-domain grown by L - 1 upward. Partial sums are reduced in worker order.

    Args:
        z_hat: activations over Omega
        X: signal over Omega
        grid: worker grid (a single-worker grid gives the full-domain computation)
        n_jobs: threads used for the map step

    Returns:
        (GramPhi, CrossPsi); CrossPsi.x_sqnorm holds ||X||^2
    """
    if z_hat.domain != X.domain or grid.domain != X.domain:
        raise ShapeError("Z, X and the grid must share the same domain",
                         expected=X.domain.sizes, actual=z_hat.domain.sizes)
    support = tuple(grid.support)
    margins = [l - 1 for l in support]
    z_pad = np.pad(z_hat.values, [(0, 0)] + [(m, m) for m in margins])
    x_pad = X.padded(support)

    def work(w: int):
        sub = grid.sub_domain(w)
        z = z_hat.values[(slice(None),) + sub.slices()]
        # z_pad is shifted by L - 1, so the grown box starts at sub.lo
        halo = tuple(slice(lo, hi + 2 * m) for lo, hi, m in zip(sub.lo, sub.hi, margins))
        z_halo = z_pad[(slice(None),) + halo]
        win = tuple(slice(lo, hi + m) for lo, hi, m in zip(sub.lo, sub.hi, margins))
        x_own = X.values[sub.slices()]
        phi, psi = _partial_stats(z, z_halo, x_pad[win], support)
        return phi, psi, float(np.sum(x_own * x_own))

    workers = range(grid.n_workers)
    if n_jobs > 1 and grid.n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as executor:
            partials = list(executor.map(work, workers))
    else:
        partials = [work(w) for w in workers]

    phi, psi, x_sqnorm = partials[0]
    phi, psi = phi.copy(), psi.copy()
    for p_phi, p_psi, p_x in partials[1:]:
        phi += p_phi
        psi += p_psi
        x_sqnorm += p_x
    return GramPhi(phi), CrossPsi(psi, x_sqnorm)


def phi_convolve(phi: GramPhi, d: np.ndarray, fft_threshold: int = FFT_THRESHOLD) -> np.ndarray:
    """(phi * D)_k[tau] = sum_k' sum_t phi[k, k', t] D_k'[tau - t], restricted to Theta"""
    n_atoms = d.shape[0]
    support = d.shape[1:-1]
    method = select_method(tuple(2 * l - 1 for l in support), fft_threshold)
    keep = tuple(slice(l - 1, 2 * l - 1) for l in support)
    out = np.zeros_like(d)
    for k in range(n_atoms):
        for k2 in range(n_atoms):
            if not np.any(phi.values[k, k2]):
                continue
            full = sps.convolve(phi.values[k, k2][..., None], d[k2], mode='full', method=method)
            out[k] += full[keep]
    return out


def gradient_D(D: Dictionary, phi: GramPhi, psi: CrossPsi) -> np.ndarray:
    """Gradient of F(Z, .) at D: phi * D - psi"""
    if phi.n_atoms != D.n_atoms or psi.values.shape != D.values.shape:
        raise ShapeError("Statistics do not match the dictionary",
                         expected=D.values.shape, actual=psi.values.shape)
    return phi_convolve(phi, D.values) - psi.values


def objective_from_stats(D: Dictionary, phi: GramPhi, psi: CrossPsi,
                         x_sqnorm: Optional[float] = None) -> float:
    """F(Z, D) = 1/2 (||X||^2 - 2 <psi, D> + <D, phi * D>)"""
    if x_sqnorm is None:
        x_sqnorm = psi.x_sqnorm
    d = D.values
    return 0.5 * (x_sqnorm - 2.0 * float(np.sum(psi.values * d))
                  + float(np.sum(d * phi_convolve(phi, d))))


def project_unit_ball(D: Dictionary) -> Dictionary:
    """D_k <- D_k / max(1, ||D_k||)"""
    scale = np.maximum(1.0, D.norms())
    return Dictionary(D.values / scale.reshape((-1,) + (1,) * (D.values.ndim - 1)))


def lipschitz_estimate(phi: GramPhi, shape: Tuple[int, ...], n_iter: int = 20, seed=0) -> float:
    """Power iteration estimate of the norm of D -> phi * D"""
    rng = check_random_state(seed)
    v = rng.randn(*shape)
    norm = 0.0
    for _ in range(n_iter):
        v_norm = np.linalg.norm(v)
        if v_norm == 0:
            return 0.0
        v = phi_convolve(phi, v / v_norm)
        norm = float(np.linalg.norm(v))
    return norm


def pgd_update(D: Dictionary, phi: GramPhi, psi: CrossPsi, x_sqnorm: Optional[float] = None,
               cfg: Optional[LineSearchConfig] = None) -> Tuple[Dictionary, PgdLog]:
    """
    Projected gradient descent on the atoms with Armijo backtracking

    The line-search runs along the projection arc: a step eta is accepted when
    F(P(D - eta g)) <= F(D) + c <g, P(D - eta g) - D>.

    Returns:
        (updated dictionary, PgdLog); log.stalled is set when the first iterate
        exhausts its backtracks, in which case D is returned unchanged
    """
    cfg = cfg or LineSearchConfig()
    d = D.values.copy()
    obj = objective_from_stats(D, phi, psi, x_sqnorm)
    log = PgdLog(initial_objective=obj, final_objective=obj)

    if cfg.initial_step is None:
        log.lipschitz = lipschitz_estimate(phi, d.shape, cfg.power_iterations)
        if log.lipschitz <= 0:
            return D.copy(), log
        step = 1.0 / log.lipschitz
    else:
        step = cfg.initial_step

    for it in range(cfg.max_iter):
        grad = phi_convolve(phi, d) - psi.values
        if not np.any(grad):
            break
        accepted = False
        for bt in range(cfg.max_backtracks):
            cand = project_unit_ball(Dictionary(d - step * grad)).values
            diff = cand - d
            if not np.any(diff):
                # projection arc stationary
                log.final_objective = obj
                return Dictionary(d), log
            new_obj = objective_from_stats(Dictionary(cand), phi, psi, x_sqnorm)
            if new_obj <= obj + cfg.sufficient_decrease * float(np.sum(grad * diff)):
                accepted = True
                break
            step *= cfg.shrink
        if not accepted:
            if it == 0:
                logger.warning(f"PGD stalled: {cfg.max_backtracks} backtracks without decrease")
                log.stalled = True
            break
        decrease = obj - new_obj
        d, prev, obj = cand, obj, new_obj
        log.steps.append({'iter': it, 'step': step, 'objective': obj, 'backtracks': bt})
        if decrease <= cfg.tol * max(abs(prev), 1e-300):
            break

    log.final_objective = obj
    logger.debug(f"PGD: {log.n_steps} steps, F {log.initial_objective:.6e} -> {obj:.6e}")
    return Dictionary(d), log


def dictionary_step(z_hat: ActivationMap, X: Signal, D: Dictionary, grid: WorkerGrid,
                    cfg: Optional[LineSearchConfig] = None,
                    n_jobs: int = 1) -> Tuple[Dictionary, PgdLog, Dict[str, float]]:
    """Stats map-reduce followed by PGD; returns timings of both phases"""
    start = time.perf_counter()
    phi, psi = compute_stats(z_hat, X, grid, n_jobs)
    t_stats = time.perf_counter() - start
    D_new, log = pgd_update(D, phi, psi, psi.x_sqnorm, cfg)
    t_dict = time.perf_counter() - start - t_stats
    return D_new, log, {'stats': t_stats, 'dict': t_dict}
