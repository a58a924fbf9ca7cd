"""Configuration management for the convdl workbench"""
import copy
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from .exceptions import ConfigError

logger = logging.getLogger(__name__)

WORKERS_ENV = 'CONVDL_WORKERS'

DEFAULTS: Dict[str, Dict[str, Any]] = {
    'data': {
        'input': None,
        'output_dir': 'output/reports',
        'checkpoint_dir': 'output/checkpoints',
        'log_dir': 'output/logs',
    },
    'cdl': {
        'n_atoms': 5,
        'atom_support': [8],
        'reg': 0.1,
        'reg_mode': 'fraction',
        'tol': None,
        'nu': 1e-4,
        'max_outer': 20,
        'init_mode': 'gaussian',
        'seed': 0,
        'resample_unused': False,
    },
    'runtime': {
        'workers': 1,
        'scheduler': 'deterministic',
        'split': 'auto',
        'seed': None,
        'soft_lock': True,
        'max_iter': 1_000_000,
        'activity': 1.0,
        'timeout': 600.0,
        'divergence_factor': 50.0,
    },
    'dictionary': {
        'shrink': 0.5,
        'sufficient_decrease': 1e-4,
        'max_backtracks': 30,
        'max_iter': 50,
        'tol': 1e-8,
        'n_jobs': 1,
    },
    'progress': {
        'show_progress': True,
        'log_level': 'INFO',
        'save_interval': 1,
    },
}


class Config:
    """Configuration manager"""

    def __init__(self, config_path: Optional[str] = "config/config.yaml",
                 values: Optional[Dict[str, Any]] = None, create_dirs: bool = True):
        """
        Load configuration from a YAML file or from an in-memory mapping

        Args:
            config_path: YAML file with sections data/cdl/runtime/dictionary/progress,
                or flat keys mirroring CdlConfig fields
            values: mapping used instead of the file when given
            create_dirs: create output/checkpoint/log directories
        """
        self.config_path = Path(config_path) if config_path else None
        raw = values if values is not None else self._load_config()
        self.config = self._merge(raw)
        self._apply_environment()
        self._validate_config()
        if create_dirs:
            self._create_directories()

    @classmethod
    def from_dict(cls, values: Dict[str, Any], create_dirs: bool = False) -> 'Config':
        return cls(None, values=values, create_dirs=create_dirs)

    def _load_config(self) -> Dict[str, Any]:
        """Load YAML configuration"""
        if self.config_path is None:
            return {}
        if not self.config_path.exists():
            raise ConfigError(f"Config file not found: {self.config_path}")
        try:
            with open(self.config_path, 'r', encoding='utf-8') as f:
                loaded = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"Cannot parse {self.config_path}: {e}") from e
        if loaded is None:
            return {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{self.config_path} must contain a mapping")
        return loaded

    def _merge(self, raw: Dict[str, Any]) -> Dict[str, Any]:
        """Defaults, then sections, then flat keys lifted into their section"""
        merged = copy.deepcopy(DEFAULTS)
        for key, value in raw.items():
            if key in merged and isinstance(value, dict):
                merged[key].update(value)
                continue
            section = next((s for s, fields in DEFAULTS.items() if key in fields), None)
            if section is None:
                raise ConfigError(f"Unknown config key: {key}")
            merged[section][key] = value
        return merged

    def _apply_environment(self):
        workers = os.environ.get(WORKERS_ENV)
        if workers:
            try:
                self.config['runtime']['workers'] = int(workers)
            except ValueError:
                raise ConfigError(f"{WORKERS_ENV} must be an integer, got '{workers}'")
            logger.debug(f"{WORKERS_ENV} overrides runtime.workers = {workers}")

    def _validate_config(self):
        """Validate value ranges"""
        cdl = self.config['cdl']
        runtime = self.config['runtime']

        if int(cdl['n_atoms']) < 1:
            raise ConfigError(f"cdl.n_atoms must be >= 1, got {cdl['n_atoms']}")
        support = cdl['atom_support']
        if isinstance(support, int):
            cdl['atom_support'] = support = [support]
        if not support or any(int(l) < 1 for l in support) or len(support) > 3:
            raise ConfigError(f"cdl.atom_support must hold 1 to 3 positive sizes, got {support}")
        if cdl['reg_mode'] not in ('fraction', 'absolute'):
            raise ConfigError(f"Invalid cdl.reg_mode: {cdl['reg_mode']}. Must be 'fraction' or 'absolute'")
        if cdl['reg_mode'] == 'fraction' and not 0 < float(cdl['reg']) <= 1:
            raise ConfigError(f"cdl.reg as a fraction of lambda_max must be in ]0, 1], got {cdl['reg']}")
        if cdl['reg_mode'] == 'absolute' and float(cdl['reg']) < 0:
            raise ConfigError(f"cdl.reg must be >= 0, got {cdl['reg']}")
        if float(cdl['nu']) <= 0:
            raise ConfigError(f"cdl.nu must be > 0, got {cdl['nu']}")
        if cdl['tol'] is not None and float(cdl['tol']) <= 0:
            raise ConfigError(f"cdl.tol must be > 0, got {cdl['tol']}")
        if int(cdl['max_outer']) < 0:
            raise ConfigError(f"cdl.max_outer must be >= 0, got {cdl['max_outer']}")
        if cdl['init_mode'] not in ('gaussian', 'patches'):
            raise ConfigError(f"Invalid cdl.init_mode: {cdl['init_mode']}. Must be 'gaussian' or 'patches'")

        if int(runtime['workers']) < 1:
            raise ConfigError(f"runtime.workers must be >= 1, got {runtime['workers']}")
        if runtime['scheduler'] not in ('deterministic', 'async'):
            raise ConfigError(f"Invalid runtime.scheduler: {runtime['scheduler']}. "
                              f"Must be 'deterministic' or 'async'")
        if runtime['split'] not in ('auto', '1d'):
            raise ConfigError(f"Invalid runtime.split: {runtime['split']}. Must be 'auto' or '1d'")

        level = str(self.config['progress']['log_level']).upper()
        if level not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            raise ConfigError(f"Invalid progress.log_level: {level}")

    def _create_directories(self):
        """Create necessary directories"""
        for key in ('output_dir', 'checkpoint_dir', 'log_dir'):
            Path(self.config['data'][key]).mkdir(parents=True, exist_ok=True)

    def get(self, *keys, default=None):
        """Get nested configuration value"""
        value = self.config
        for key in keys:
            if isinstance(value, dict) and key in value:
                value = value[key]
            else:
                return default
        return value

    def set(self, section: str, key: str, value: Any):
        """Override a value (CLI flags) and re-validate"""
        if section not in self.config:
            raise ConfigError(f"Unknown config section: {section}")
        self.config[section][key] = value
        self._validate_config()

    @property
    def n_workers(self) -> int:
        return int(self.config['runtime']['workers'])

    @property
    def scheduler(self) -> str:
        return self.config['runtime']['scheduler']

    @property
    def input_path(self) -> Optional[Path]:
        value = self.config['data']['input']
        return Path(value) if value else None

    @property
    def output_dir(self) -> Path:
        return Path(self.config['data']['output_dir'])

    @property
    def checkpoint_dir(self) -> Path:
        return Path(self.config['data']['checkpoint_dir'])

    @property
    def log_dir(self) -> Path:
        return Path(self.config['data']['log_dir'])

    @property
    def log_level(self) -> str:
        return str(self.config['progress']['log_level']).upper()

    @property
    def show_progress(self) -> bool:
        return bool(self.config['progress']['show_progress'])

    def __repr__(self):
        return (f"Config(workers={self.n_workers}, scheduler={self.scheduler}, "
                f"K={self.config['cdl']['n_atoms']}, L={self.config['cdl']['atom_support']})")
