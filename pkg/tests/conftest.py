"""Shared fixtures: small seeded instances and throwaway configuration"""
import logging

import numpy as np
import pytest
import yaml

from src.config_loader import Config
from src.synthetic import gaussian_dictionary, generate_synthetic, get_preset
from src.tensor_core import Dictionary, Signal


@pytest.fixture
def rng():
    return np.random.RandomState(0)


@pytest.fixture
def instance_1d(rng):
    """Gaussian signal (T=60, P=2) and 3 unit-norm atoms of length 5"""
    X = Signal(rng.randn(60, 2))
    D = gaussian_dictionary(3, (5,), 2, rng)
    return X, D


@pytest.fixture
def instance_2d(rng):
    """Gaussian image 16x16 and 2 unit-norm 3x3 atoms"""
    X = Signal(rng.randn(16, 16, 1))
    D = gaussian_dictionary(2, (3, 3), 1, rng)
    return X, D


@pytest.fixture
def sparse_1d():
    """Bernoulli-Gaussian 1D signal of length 64 L with its generating model"""
    spec = get_preset('1d-tiny', sizes=(512,), support=(8,), n_atoms=2, channels=2,
                      rho=0.01, seed=3)
    return generate_synthetic(spec)


@pytest.fixture
def dirac_atom():
    """Single atom [1, 0, 0, 0]: beta equals X exactly"""
    return Dictionary(np.array([1.0, 0.0, 0.0, 0.0]).reshape(1, 4, 1))


@pytest.fixture
def config_file(tmp_path):
    """YAML config writing every output under tmp_path"""
    values = {
        'data': {
            'output_dir': str(tmp_path / 'reports'),
            'checkpoint_dir': str(tmp_path / 'checkpoints'),
            'log_dir': str(tmp_path / 'logs'),
        },
        'cdl': {'n_atoms': 2, 'atom_support': [8], 'max_outer': 2},
        'progress': {'show_progress': False},
    }
    path = tmp_path / 'config.yaml'
    with open(path, 'w', encoding='utf-8') as f:
        yaml.safe_dump(values, f)
    return path


@pytest.fixture
def config(config_file):
    return Config(str(config_file))


@pytest.fixture(autouse=True)
def _reset_root_handlers():
    """Drop the file/console handlers a test may have installed"""
    yield
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, '_convdl_handler', False):
            root.removeHandler(handler)
            handler.close()
