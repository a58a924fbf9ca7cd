"""
Tensor core - domains, multichannel arrays and the convolution algebra
shared by every solver in the package.

Array layouts (all float64):
    Signal          (*T, P)     channels last, row-major over (position, channel)
    Dictionary      (K, *L, P)  atom index first
    ActivationMap   (K, *T)     one activation channel per atom
"""
import logging
from dataclasses import dataclass
from typing import Iterator, Sequence, Tuple

import numpy as np
from scipy import signal as sps

from .exceptions import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

# Atom supports with more samples than this use the FFT path
FFT_THRESHOLD = 256
MAX_DIM = 3


@dataclass(frozen=True)
class Domain:
    """Integer box prod_i [0, T_i["""
    sizes: Tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        object.__setattr__(self, 'sizes', sizes)
        if not 1 <= len(sizes) <= MAX_DIM:
            raise ShapeError(f"Domain dimension must be in [1, {MAX_DIM}], got {len(sizes)}",
                             expected=f"1..{MAX_DIM}", actual=len(sizes))
        if any(s <= 0 for s in sizes):
            raise ShapeError(f"Domain sizes must be positive, got {sizes}",
                             expected="> 0", actual=sizes)

    @property
    def d(self) -> int:
        return len(self.sizes)

    @property
    def size(self) -> int:
        return int(np.prod(self.sizes))

    def contains(self, position: Sequence[int]) -> bool:
        return len(position) == self.d and all(
            0 <= p < s for p, s in zip(position, self.sizes))

    def fits_in(self, other: 'Domain') -> bool:
        """True when this box fits in `other` componentwise"""
        return self.d == other.d and all(a <= b for a, b in zip(self.sizes, other.sizes))

    def positions(self) -> Iterator[Tuple[int, ...]]:
        """Iterate positions in row-major order"""
        for flat in range(self.size):
            yield tuple(int(i) for i in np.unravel_index(flat, self.sizes))

    def to_dict(self):
        return {'d': self.d, 'sizes': list(self.sizes)}


def _as_float_array(values) -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("Array contains NaN or Inf values")
    return arr


@dataclass
class Signal:
    """Multichannel signal over a domain, zero outside of it"""
    values: np.ndarray

    def __post_init__(self):
        self.values = _as_float_array(self.values)
        if self.values.ndim < 2:
            raise ShapeError("Signal values need at least one spatial axis and a channel axis",
                             expected="(*T, P)", actual=self.values.shape)
        Domain(self.values.shape[:-1])

    @classmethod
    def zeros(cls, domain: Domain, channels: int = 1) -> 'Signal':
        return cls(np.zeros(domain.sizes + (channels,)))

    @property
    def domain(self) -> Domain:
        return Domain(self.values.shape[:-1])

    @property
    def channels(self) -> int:
        return self.values.shape[-1]

    def sqnorm(self) -> float:
        return float(np.sum(self.values * self.values))

    def padded(self, support: Sequence[int]) -> np.ndarray:
        """Zero-pad the upper end of each axis by L_i - 1 samples"""
        pad = [(0, int(s) - 1) for s in support] + [(0, 0)]
        return np.pad(self.values, pad)


@dataclass
class Dictionary:
    """K atoms of P channels on the support Theta"""
    values: np.ndarray

    def __post_init__(self):
        self.values = _as_float_array(self.values)
        if self.values.ndim < 3:
            raise ShapeError("Dictionary values must be shaped (K, *L, P)",
                             expected="(K, *L, P)", actual=self.values.shape)
        Domain(self.values.shape[1:-1])

    @property
    def n_atoms(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[-1]

    @property
    def support(self) -> Domain:
        return Domain(self.values.shape[1:-1])

    def _flat(self) -> np.ndarray:
        return self.values.reshape(self.n_atoms, -1)

    def sq_norms(self) -> np.ndarray:
        flat = self._flat()
        return np.sum(flat * flat, axis=1)

    def norms(self) -> np.ndarray:
        return np.sqrt(self.sq_norms())

    def inf_norms(self) -> np.ndarray:
        return np.max(np.abs(self._flat()), axis=1)

    def copy(self) -> 'Dictionary':
        return Dictionary(self.values.copy())


@dataclass
class ActivationMap:
    """K activation channels over the signal domain (dense storage)"""
    values: np.ndarray

    def __post_init__(self):
        self.values = _as_float_array(self.values)
        if self.values.ndim < 2:
            raise ShapeError("Activation values must be shaped (K, *T)",
                             expected="(K, *T)", actual=self.values.shape)
        Domain(self.values.shape[1:])

    @classmethod
    def zeros(cls, domain: Domain, n_atoms: int) -> 'ActivationMap':
        return cls(np.zeros((n_atoms,) + domain.sizes))

    @property
    def domain(self) -> Domain:
        return Domain(self.values.shape[1:])

    @property
    def n_atoms(self) -> int:
        return self.values.shape[0]

    def nonzeros(self) -> Iterator[Tuple[int, Tuple[int, ...], float]]:
        """Yield (k, position, value) for every nonzero activation, row-major"""
        for idx in np.argwhere(self.values != 0):
            k, pos = int(idx[0]), tuple(int(i) for i in idx[1:])
            yield k, pos, float(self.values[(k,) + pos])

    def nnz(self) -> int:
        return int(np.count_nonzero(self.values))

    def l1(self) -> float:
        return float(np.sum(np.abs(self.values)))

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0


def select_method(support: Sequence[int], fft_threshold: int) -> str:
    return 'fft' if int(np.prod(support)) > fft_threshold else 'direct'


def check_code_shapes(z_hat: ActivationMap, D: Dictionary):
    """Validate that Z and D can be convolved together"""
    if z_hat.n_atoms != D.n_atoms:
        raise ShapeError(f"Atom count mismatch: Z has {z_hat.n_atoms}, D has {D.n_atoms}",
                         expected=D.n_atoms, actual=z_hat.n_atoms)
    if not D.support.fits_in(z_hat.domain):
        raise ShapeError(f"Atom support {D.support.sizes} does not fit in {z_hat.domain.sizes}",
                         expected=z_hat.domain.sizes, actual=D.support.sizes)


def check_signal_shapes(X: Signal, D: Dictionary):
    """Validate that X and D can be correlated together"""
    if X.channels != D.channels:
        raise ShapeError(f"Channel mismatch: X has {X.channels}, D has {D.channels}",
                         expected=D.channels, actual=X.channels)
    if not D.support.fits_in(X.domain):
        raise ShapeError(f"Atom support {D.support.sizes} does not fit in {X.domain.sizes}",
                         expected=X.domain.sizes, actual=D.support.sizes)


def convolve_array(z: np.ndarray, d: np.ndarray,
                   fft_threshold: int = FFT_THRESHOLD) -> np.ndarray:
    """Full-support convolution sum_k z_k * d_k, shaped (*(T + L - 1), P)"""
    support = d.shape[1:-1]
    method = select_method(support, fft_threshold)
    out_shape = tuple(t + l - 1 for t, l in zip(z.shape[1:], support)) + (d.shape[-1],)
    out = np.zeros(out_shape)
    for z_k, d_k in zip(z, d):
        if not np.any(z_k):
            continue
        # a singleton channel axis on z_k spreads each activation to the P channels
        out += sps.convolve(z_k[..., None], d_k, mode='full', method=method)
    return out


def correlate_array(x_full: np.ndarray, d: np.ndarray,
                    fft_threshold: int = FFT_THRESHOLD) -> np.ndarray:
    """Valid correlation of a full-support signal with every atom.

    Args:
        x_full: array shaped (*(T + L - 1), P), zero-padded signal or residual
        d: dictionary values (K, *L, P)

    Returns:
        array shaped (K, *T) with out[k, w] = sum_{tau, p} x_full[w + tau, p] d[k, tau, p]
    """
    support = d.shape[1:-1]
    method = select_method(support, fft_threshold)
    out = np.empty((d.shape[0],) + tuple(s - l + 1 for s, l in zip(x_full.shape[:-1], support)))
    for k, d_k in enumerate(d):
        # matching channel counts collapse the channel axis to a single summed entry
        out[k] = sps.correlate(x_full, d_k, mode='valid', method=method)[..., 0]
    return out


def convolve(z_hat: ActivationMap, D: Dictionary, full: bool = False,
             fft_threshold: int = FFT_THRESHOLD) -> Signal:
    """
    Reconstruct Z * D under zero padding

    Args:
        z_hat: activations over Omega
        D: dictionary
        full: return the full support Omega + Theta instead of the same-size output
        fft_threshold: atom size above which the FFT path is used

    Returns:
        Signal over Omega (or over the full support when `full`)
    """
    check_code_shapes(z_hat, D)
    out = convolve_array(z_hat.values, D.values, fft_threshold)
    if not full:
        out = out[tuple(slice(0, t) for t in z_hat.domain.sizes)]
    return Signal(out)


def correlate(X: Signal, D: Dictionary, fft_threshold: int = FFT_THRESHOLD) -> ActivationMap:
    """Cross-correlate X with each atom (X * D~), zero padded, same size as X"""
    check_signal_shapes(X, D)
    return ActivationMap(correlate_array(X.padded(D.support.sizes), D.values, fft_threshold))


def soft_threshold(u, lmbd: float):
    """ST(u, lmbd) = sign(u) max(|u| - lmbd, 0), elementwise on arrays"""
    if lmbd < 0:
        raise ValueError(f"Threshold must be nonnegative, got {lmbd}")
    result = np.sign(u) * np.maximum(np.abs(u) - lmbd, 0.0)
    if np.ndim(result) == 0:
        return float(result)
    return result


def lambda_max(X: Signal, D: Dictionary) -> float:
    """Smallest regularization for which Z = 0 solves the sparse coding problem"""
    return float(np.max(np.abs(correlate(X, D).values)))


def residual_full(X: Signal, z_hat: ActivationMap, D: Dictionary,
                  fft_threshold: int = FFT_THRESHOLD) -> np.ndarray:
    """X - Z * D over the full support, X being zero outside Omega"""
    check_code_shapes(z_hat, D)
    check_signal_shapes(X, D)
    if X.domain != z_hat.domain:
        raise ShapeError("X and Z must live on the same domain",
                         expected=X.domain.sizes, actual=z_hat.domain.sizes)
    return X.padded(D.support.sizes) - convolve_array(z_hat.values, D.values, fft_threshold)


def data_fit(X: Signal, z_hat: ActivationMap, D: Dictionary) -> float:
    """F(Z, D) = 1/2 ||X - Z * D||_2^2"""
    res = residual_full(X, z_hat, D)
    return 0.5 * float(np.sum(res * res))


def objective(X: Signal, z_hat: ActivationMap, D: Dictionary, lmbd: float) -> float:
    """F(Z, D) + lmbd ||Z||_1"""
    return data_fit(X, z_hat, D) + lmbd * z_hat.l1()


def atom_cross_correlation(D: Dictionary, fft_threshold: int = FFT_THRESHOLD) -> np.ndarray:
    """
    Atom-to-atom cross-correlation table

    Returns:
        array shaped (K, K, *(2L - 1)) with
        out[k0, k, s + L - 1] = sum_tau D_k0[tau] . D_k[tau - s]
    """
    n_atoms = D.n_atoms
    out = np.empty((n_atoms, n_atoms) + tuple(2 * l - 1 for l in D.support.sizes))
    for k0 in range(n_atoms):
        for k in range(n_atoms):
            out[k0, k] = pair_cross_correlation(D.values[k0], D.values[k], fft_threshold)
    return out


def pair_cross_correlation(d0: np.ndarray, d1: np.ndarray,
                           fft_threshold: int = FFT_THRESHOLD) -> np.ndarray:
    """(D_k0 * D~_k) over all shifts, shaped (*(2L - 1))"""
    method = select_method(d0.shape[:-1], fft_threshold)
    full = sps.correlate(d0, d1, mode='full', method=method)
    # the zero channel lag sits at index P - 1
    return full[..., d0.shape[-1] - 1]


def lp_norm(values: np.ndarray, p: float, channel_axis: int = -1) -> float:
    """Pointwise vector p-norm over channels, then p-norm over positions"""
    pointwise = np.linalg.norm(values, ord=p, axis=channel_axis)
    return float(np.linalg.norm(pointwise.ravel(), ord=p))


@dataclass(frozen=True)
class SubDomain:
    """Half-open integer box prod_i [lo_i, hi_i[ in global coordinates"""
    lo: Tuple[int, ...]
    hi: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, 'lo', tuple(int(v) for v in self.lo))
        object.__setattr__(self, 'hi', tuple(int(v) for v in self.hi))
        if len(self.lo) != len(self.hi):
            raise ShapeError("SubDomain bounds must have the same dimension",
                             expected=len(self.lo), actual=len(self.hi))

    @classmethod
    def from_domain(cls, domain: Domain) -> 'SubDomain':
        return cls((0,) * domain.d, domain.sizes)

    @property
    def d(self) -> int:
        return len(self.lo)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(max(h - l, 0) for l, h in zip(self.lo, self.hi))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def is_empty(self) -> bool:
        return self.size == 0

    def contains(self, position: Sequence[int]) -> bool:
        return all(l <= p < h for p, l, h in zip(position, self.lo, self.hi))

    def intersect(self, other: 'SubDomain') -> 'SubDomain':
        return SubDomain(tuple(max(a, b) for a, b in zip(self.lo, other.lo)),
                         tuple(min(a, b) for a, b in zip(self.hi, other.hi)))

    def overlaps(self, other: 'SubDomain') -> bool:
        return not self.intersect(other).is_empty()

    def expand(self, margins: Sequence[int]) -> 'SubDomain':
        return SubDomain(tuple(l - m for l, m in zip(self.lo, margins)),
                         tuple(h + m for h, m in zip(self.hi, margins)))

    def clip(self, domain: Domain) -> 'SubDomain':
        return self.intersect(SubDomain.from_domain(domain))

    def slices(self, origin: Sequence[int] = None) -> Tuple[slice, ...]:
        """Array slices of this box inside an array whose [0] sits at `origin`"""
        origin = origin if origin is not None else (0,) * self.d
        return tuple(slice(l - o, h - o) for l, h, o in zip(self.lo, self.hi, origin))

    def positions(self) -> Iterator[Tuple[int, ...]]:
        for local in np.ndindex(*self.shape):
            yield tuple(l + i for l, i in zip(self.lo, local))

    def to_dict(self):
        return {'lo': list(self.lo), 'hi': list(self.hi)}


def neighborhood(position: Sequence[int], support: Sequence[int]) -> SubDomain:
    """V(w0) = prod_i [w0_i - L_i + 1, w0_i + L_i[, unclipped"""
    return SubDomain(tuple(p - l + 1 for p, l in zip(position, support)),
                     tuple(p + l for p, l in zip(position, support)))
