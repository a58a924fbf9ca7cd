"""
Signal Store - read and write .sig containers and PNG images

A .sig file is one JSON header line followed by the little-endian float64
payload in row-major order, channels last:

    {"d": 2, "sizes": [T1, T2], "channels": P, "dtype": "f64", "kind": "signal"}\n
    <prod(sizes) * channels * 8 bytes>

Dictionaries keep K as the leading axis (payload shaped (K, L1, .., Ld, P)) and
record it under "atoms". Activation maps are stored as K-channel signals.
Headers without "kind" read as signals unless the caller asks for another kind.
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from PIL import Image

from .exceptions import ShapeError, SignalFormatError
from .tensor_core import ActivationMap, Dictionary, Signal

logger = logging.getLogger(__name__)

SIG_DTYPE = '<f8'
SIG_DTYPE_NAME = 'f64'
REQUIRED_KEYS = ('d', 'sizes', 'channels', 'dtype')

# Pillow modes ingested as one channel
GRAY_MODES = ('1', 'L', 'LA')

KINDS = {
    'signal': Signal,
    'dictionary': Dictionary,
    'activation': ActivationMap,
}

Storable = Union[Signal, Dictionary, ActivationMap]


def _kind_of(obj: Storable) -> str:
    for kind, cls in KINDS.items():
        if isinstance(obj, cls):
            return kind
    raise SignalFormatError(f"Cannot store object of type {type(obj).__name__}")


def _channels_last(obj: Storable, kind: str) -> np.ndarray:
    values = np.ascontiguousarray(obj.values, dtype=SIG_DTYPE)
    if kind == 'activation':
        values = np.ascontiguousarray(np.moveaxis(values, 0, -1))
    return values


def write_sig(path: Path, obj: Storable, meta: Optional[Dict[str, Any]] = None) -> Path:
    """Write a Signal, Dictionary or ActivationMap to a .sig container"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kind = _kind_of(obj)
    values = _channels_last(obj, kind)
    sizes = values.shape[1:-1] if kind == 'dictionary' else values.shape[:-1]
    header = {
        'd': len(sizes),
        'sizes': [int(s) for s in sizes],
        'channels': int(values.shape[-1]),
        'dtype': SIG_DTYPE_NAME,
        'kind': kind,
    }
    if kind == 'dictionary':
        header['atoms'] = int(values.shape[0])
    if meta:
        header['meta'] = meta
    with open(path, 'wb') as f:
        f.write(json.dumps(header).encode('utf-8') + b'\n')
        f.write(values.tobytes(order='C'))
    return path


def read_sig_header(path: Path) -> Dict[str, Any]:
    with open(path, 'rb') as f:
        line = f.readline()
    try:
        header = json.loads(line.decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SignalFormatError(f"{path}: invalid header ({e})") from e
    if not isinstance(header, dict):
        raise SignalFormatError(f"{path}: header is not a JSON object")
    missing = [key for key in REQUIRED_KEYS if key not in header]
    if missing:
        raise SignalFormatError(f"{path}: header misses {', '.join(missing)}")
    if header['dtype'] != SIG_DTYPE_NAME:
        raise SignalFormatError(f"{path}: unsupported dtype {header['dtype']!r}")
    sizes = header['sizes']
    if not isinstance(sizes, list) or len(sizes) != header['d'] or header['d'] < 1:
        raise SignalFormatError(f"{path}: sizes {sizes} do not match d={header['d']}")
    if 'kind' in header and header['kind'] not in KINDS:
        raise SignalFormatError(f"{path}: unknown kind {header['kind']}")
    return header


def _payload_shape(header: Dict[str, Any], kind: str, n_bytes: int) -> Tuple[int, ...]:
    """Channels-last payload shape; a dictionary without "atoms" takes K from the size"""
    inner = tuple(int(s) for s in header['sizes']) + (int(header['channels']),)
    if kind != 'dictionary':
        return inner
    if 'atoms' in header:
        return (int(header['atoms']),) + inner
    per_atom = int(np.prod(inner)) * 8
    return (n_bytes // per_atom if per_atom else 0,) + inner


def read_sig(path: Path, expected_kind: Optional[str] = None) -> Storable:
    """Read a .sig container back into its typed array"""
    path = Path(path)
    if not path.exists():
        raise SignalFormatError(f"File not found: {path}")
    header = read_sig_header(path)
    kind = header.get('kind', expected_kind or 'signal')
    if expected_kind and kind != expected_kind:
        raise ShapeError(f"{path} holds a {kind}, expected {expected_kind}",
                         expected=expected_kind, actual=kind)
    with open(path, 'rb') as f:
        f.readline()
        payload = f.read()
    shape = _payload_shape(header, kind, len(payload))
    n_expected = int(np.prod(shape)) * 8
    if len(payload) != n_expected or n_expected == 0:
        raise SignalFormatError(f"{path}: payload has {len(payload)} bytes, expected {n_expected}")
    values = np.frombuffer(payload, dtype=SIG_DTYPE).reshape(shape).astype(np.float64)
    if kind == 'activation':
        values = np.ascontiguousarray(np.moveaxis(values, -1, 0))
    return KINDS[kind](values)


def load_png(path: Path, grayscale: bool = False, max_size: Optional[int] = None) -> Signal:
    """
    Load an image as a Signal with values in [0, 1]

    Gray images give P = 1 and colour images P = 3.

    Args:
        path: image file (any format Pillow reads)
        grayscale: convert colour images to luminance
        max_size: optional bound on the largest dimension, aspect ratio preserved
    """
    path = Path(path)
    try:
        img = Image.open(path)
    except (OSError, ValueError) as e:
        raise SignalFormatError(f"Cannot open image {path}: {e}") from e

    scale = 255.0
    if img.mode.startswith('I'):
        # 16-bit gray, resampled as float
        img = Image.fromarray((np.asarray(img, dtype=np.float64) / 65535.0).astype(np.float32))
        scale = 1.0
    elif grayscale or img.mode in GRAY_MODES:
        img = img.convert('L')
    else:
        # Drop alpha and palettes
        img = img.convert('RGB')
    if max_size:
        img.thumbnail((max_size, max_size), Image.Resampling.LANCZOS)

    values = np.asarray(img, dtype=np.float64) / scale
    if values.ndim == 2:
        values = values[..., None]
    logger.debug(f"Loaded {path.name}: {values.shape}")
    return Signal(values)


def to_uint8(values: np.ndarray) -> np.ndarray:
    """Min-max rescale to 0..255"""
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 0:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.round(255 * (values - lo) / (hi - lo)).astype(np.uint8)


def save_png(path: Path, values: np.ndarray) -> Path:
    """Write a (H, W) or (H, W, P) array with P in {1, 3} as PNG"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = to_uint8(values)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim not in (2, 3):
        raise ShapeError("Only 2D images can be written as PNG",
                         expected="(H, W[, P])", actual=arr.shape)
    Image.fromarray(arr).save(path, format='PNG')
    return path


def atom_mosaic(D: Dictionary, pad: int = 1, columns: Optional[int] = None) -> np.ndarray:
    """Tile 2D atoms into one image for inspection"""
    if D.support.d != 2:
        raise ShapeError("Atom mosaics need 2D atoms", expected=2, actual=D.support.d)
    n_atoms = D.n_atoms
    h, w = D.support.sizes
    columns = columns or int(np.ceil(np.sqrt(n_atoms)))
    rows = int(np.ceil(n_atoms / columns))
    mosaic = np.zeros((rows * (h + pad) + pad, columns * (w + pad) + pad, D.channels))
    for k in range(n_atoms):
        r, c = divmod(k, columns)
        atom = D.values[k]
        scale = np.max(np.abs(atom))
        top, left = pad + r * (h + pad), pad + c * (w + pad)
        mosaic[top:top + h, left:left + w] = atom / scale if scale > 0 else atom
    return mosaic


class SignalStore:
    """Directory of .sig containers with a JSON manifest"""

    MANIFEST = 'manifest.json'

    def __init__(self, root: Path):
        """
        Initialize store

        Args:
            root: directory holding the containers
        """
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

        # Track statistics
        self.stats = {
            'written': 0,
            'read': 0,
            'bytes_written': 0,
        }

    def path(self, name: str) -> Path:
        return self.root / (name if name.endswith('.sig') else f"{name}.sig")

    def save(self, name: str, obj: Storable, meta: Optional[Dict[str, Any]] = None) -> Path:
        path = write_sig(self.path(name), obj, meta)
        self.stats['written'] += 1
        self.stats['bytes_written'] += path.stat().st_size
        logger.debug(f"Saved {path}")
        return path

    def load(self, name: str, expected_kind: Optional[str] = None) -> Storable:
        obj = read_sig(self.path(name), expected_kind)
        self.stats['read'] += 1
        return obj

    def exists(self, name: str) -> bool:
        return self.path(name).exists()

    def list(self) -> List[str]:
        return sorted(p.stem for p in self.root.glob('*.sig'))

    def write_manifest(self, manifest: Dict[str, Any]) -> Path:
        path = self.root / self.MANIFEST
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(manifest, f, indent=2)
        return path

    def read_manifest(self) -> Optional[Dict[str, Any]]:
        path = self.root / self.MANIFEST
        if not path.exists():
            return None
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)

    def get_stats(self) -> Dict[str, int]:
        """Get store statistics"""
        return self.stats.copy()


def load_signal(path: Path, grayscale: bool = False, max_size: Optional[int] = None) -> Signal:
    """Load a signal from a .sig container or an image file"""
    path = Path(path)
    if path.suffix == '.sig':
        return read_sig(path, expected_kind='signal')
    return load_png(path, grayscale=grayscale, max_size=max_size)


def signal_shape(path: Path) -> Tuple[int, ...]:
    """Sizes plus channels, read from the header only"""
    header = read_sig_header(Path(path))
    return tuple(int(s) for s in header['sizes']) + (int(header['channels']),)
