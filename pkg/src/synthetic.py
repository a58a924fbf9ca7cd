"""
Synthetic data: Bernoulli-Gaussian sparse convolutional signals, texture
images and recovery metrics
"""
import itertools
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from sklearn.utils import check_random_state

from .exceptions import ConfigError
from .grid_protocol import WorkerGrid
from .tensor_core import (
    ActivationMap, Dictionary, Domain, Signal, convolve, pair_cross_correlation, residual_full,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the sparse convolutional generative model"""
    sizes: Tuple[int, ...]
    channels: int = 1
    n_atoms: int = 5
    support: Tuple[int, ...] = (16,)
    rho: float = 0.007
    mean: float = 0.0
    std: float = 10.0
    noise_std: float = 1.0
    seed: Optional[int] = 0

    def __post_init__(self):
        object.__setattr__(self, 'sizes', tuple(int(s) for s in self.sizes))
        object.__setattr__(self, 'support', tuple(int(l) for l in self.support))
        self.validate()

    @property
    def d(self) -> int:
        return len(self.sizes)

    def validate(self):
        if not 0 <= self.rho <= 1:
            raise ConfigError(f"rho must be in [0, 1], got {self.rho}")
        if len(self.sizes) != len(self.support):
            raise ConfigError(f"sizes {self.sizes} and support {self.support} differ in dimension")
        if min(self.sizes + self.support) < 1 or self.channels < 1 or self.n_atoms < 1:
            raise ConfigError("All sizes, channels and atom counts must be positive")
        if any(l > t for l, t in zip(self.support, self.sizes)):
            raise ConfigError(f"Atom support {self.support} does not fit in {self.sizes}")
        if self.std < 0 or self.noise_std < 0:
            raise ConfigError("Standard deviations must be nonnegative")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


PRESETS: Dict[str, SyntheticSpec] = {
    '1d-tiny': SyntheticSpec(sizes=(64 * 16,), channels=7, n_atoms=5, support=(16,)),
    '1d-small': SyntheticSpec(sizes=(150 * 250,), channels=7, n_atoms=25, support=(250,)),
    '2d-tiny': SyntheticSpec(sizes=(128, 128), channels=1, n_atoms=5, support=(8, 8)),
    '2d-small': SyntheticSpec(sizes=(512, 512), channels=3, n_atoms=25, support=(16, 16)),
}

# Presets with the full experimental parameters, only run on request
FULL_PRESETS = ('1d-small', '2d-small')


def get_preset(name: str, **overrides) -> SyntheticSpec:
    if name not in PRESETS:
        raise ConfigError(f"Unknown preset '{name}'. Available: {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides) if overrides else PRESETS[name]


def gaussian_dictionary(n_atoms: int, support: Tuple[int, ...], channels: int,
                        seed=None) -> Dictionary:
    """i.i.d. standard normal atoms normalized to unit l2 norm"""
    rng = check_random_state(seed)
    values = rng.randn(n_atoms, *support, channels)
    norms = np.sqrt(np.sum(values.reshape(n_atoms, -1) ** 2, axis=1))
    return Dictionary(values / norms.reshape((-1,) + (1,) * (values.ndim - 1)))


def generate_synthetic(spec: SyntheticSpec) -> Tuple[Signal, Dictionary, ActivationMap]:
    """
    Draw X = Z* * D* + noise

    Activations are Bernoulli(rho) times N(mean, std) and only sit at positions
    where the whole atom fits inside the domain, so the noiseless signal is
    exactly reconstructible.

    Returns:
        (X, D*, Z*)
    """
    rng = check_random_state(spec.seed)
    D = gaussian_dictionary(spec.n_atoms, spec.support, spec.channels, rng)
    domain = Domain(spec.sizes)
    z = np.zeros((spec.n_atoms,) + domain.sizes)
    valid = (slice(None),) + tuple(slice(0, t - l + 1) for t, l in zip(spec.sizes, spec.support))
    shape = z[valid].shape
    mask = rng.random_sample(shape) < spec.rho
    z[valid] = mask * rng.normal(spec.mean, spec.std, size=shape)
    Z = ActivationMap(z)
    x = convolve(Z, D).values
    if spec.noise_std > 0:
        x = x + spec.noise_std * rng.randn(*x.shape)
    logger.debug(f"Synthetic signal {spec.sizes}x{spec.channels}: {Z.nnz()} activations")
    return Signal(x), D, Z


def generate_texture(sizes: Tuple[int, int] = (128, 128), channels: int = 1, seed=None,
                     n_gratings: int = 6, smoothness: float = 1.5,
                     center: bool = True) -> Signal:
    """
    Structured texture image standing in for a natural image

    Oriented gratings with random frequencies and phases, modulated by smooth
    random envelopes, plus band-limited noise. Values are scaled to [0, 1]
    (and mean-centered when `center`).
    """
    rng = check_random_state(seed)
    yy, xx = np.meshgrid(np.arange(sizes[0]), np.arange(sizes[1]), indexing='ij')
    img = np.zeros(tuple(sizes) + (channels,))
    for p in range(channels):
        layer = np.zeros(sizes)
        for _ in range(n_gratings):
            theta = rng.uniform(0, np.pi)
            freq = rng.uniform(0.05, 0.3)
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.cos(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
            envelope = ndimage.gaussian_filter(rng.rand(*sizes), sigma=min(sizes) / 8)
            envelope = (envelope - envelope.min()) / max(np.ptp(envelope), 1e-12)
            layer += envelope * wave
        layer += 0.5 * ndimage.gaussian_filter(rng.randn(*sizes), sigma=smoothness)
        img[..., p] = layer
    img = (img - img.min()) / max(np.ptp(img), 1e-12)
    if center:
        img = img - img.mean()
    return Signal(img)


def blob_dictionary(support: Tuple[int, ...], profile: Sequence[float] = (1.0, 2.0, 1.0),
                    channels: int = 1) -> Dictionary:
    """Single separable blob atom (outer product of `profile`), centered in the support"""
    profile = np.asarray(profile, dtype=float)
    if any(len(profile) > l for l in support):
        raise ConfigError(f"Profile of length {len(profile)} does not fit in {tuple(support)}")
    blob = profile
    for _ in range(len(support) - 1):
        blob = np.multiply.outer(blob, profile)
    atom = np.zeros(tuple(support) + (channels,))
    index = tuple(slice((l - len(profile)) // 2, (l - len(profile)) // 2 + len(profile))
                  for l in support)
    atom[index] = blob[..., None]
    return Dictionary((atom / np.sqrt(np.sum(atom * atom)))[None])


def corner_points(grid: WorkerGrid) -> List[Tuple[int, ...]]:
    """Interior grid corners whose cut indices are all odd; each worker touches at most one"""
    axes = [list(cut[1:-1:2]) for cut in grid.cuts]
    if any(not a for a in axes):
        return []
    return [tuple(int(p) for p in point) for point in itertools.product(*axes)]


def generate_corner_image(grid: WorkerGrid, profile: Sequence[float] = (1.0, 2.0, 1.0),
                          amplitude: float = 4.0, noise_std: float = 0.01,
                          seed=None) -> Tuple[Signal, Dictionary]:
    """
    Image whose energy sits where 2^d workers meet

    Around every corner from `corner_points` the blob atom is placed once in each
    adjacent sub-domain, at the position next to the corner, with weight
    amplitude / 2^d. Strongly correlated coordinates owned by different workers
    then compete for the same residual, which is what the soft-lock arbitration
    is there to prevent.

    Returns:
        (X, D) with D the single blob atom
    """
    rng = check_random_state(seed)
    D = blob_dictionary(grid.support, profile)
    d = grid.domain.d
    z = np.zeros((1,) + grid.domain.sizes)
    for corner in corner_points(grid):
        for offset in itertools.product((-1, 0), repeat=d):
            z[(0,) + tuple(c + o for c, o in zip(corner, offset))] = amplitude / 2 ** d
    x = convolve(ActivationMap(z), D).values
    if noise_std > 0:
        x = x + noise_std * rng.randn(*x.shape)
    logger.debug(f"Corner image {grid.domain.sizes}: {len(corner_points(grid))} corners")
    return Signal(x), D


def relative_reconstruction_error(X: Signal, z_hat: ActivationMap, D: Dictionary) -> float:
    """||X - Z * D||_2 / ||X||_2 with the residual taken over the full support"""
    norm = np.sqrt(X.sqnorm())
    if norm == 0:
        return 0.0
    res = residual_full(X, z_hat, D)
    return float(np.sqrt(np.sum(res * res)) / norm)


def atom_recovery_score(D: Dictionary, D_ref: Dictionary) -> Tuple[float, List[float]]:
    """
    Mean over reference atoms of the best absolute normalized correlation,
    maximized over learned atoms and shifts

    Returns:
        (mean score, per reference atom scores), all in [0, 1]
    """
    norms = D.norms()
    ref_norms = D_ref.norms()
    scores = []
    for j in range(D_ref.n_atoms):
        best = 0.0
        for k in range(D.n_atoms):
            if norms[k] == 0 or ref_norms[j] == 0:
                continue
            corr = pair_cross_correlation(D_ref.values[j], D.values[k])
            best = max(best, float(np.max(np.abs(corr))) / (norms[k] * ref_norms[j]))
        scores.append(min(best, 1.0))
    return float(np.mean(scores)) if scores else 0.0, scores


@dataclass
class RecoveryMetrics:
    relative_error: float
    atom_score: Optional[float] = None
    per_atom: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def recovery_metrics(X: Signal, z_hat: ActivationMap, D: Dictionary,
                     D_ref: Optional[Dictionary] = None) -> RecoveryMetrics:
    metrics = RecoveryMetrics(relative_reconstruction_error(X, z_hat, D))
    if D_ref is not None:
        metrics.atom_score, metrics.per_atom = atom_recovery_score(D, D_ref)
    return metrics
