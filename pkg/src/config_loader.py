"""
Configuration loader for the transition-loss toolkit.
Loads settings from config.yaml and provides dotted-key access to them.
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from .errors import ConfigError

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "TRANSITION_LOSS_OUTPUT_DIR"

DEFAULT_CONFIG: Dict[str, Any] = {
    'training': {
        'learning_rate': 1e-3,
        'weight_decay': 0.01,
        'batch_size': 32,
        'max_len': 128,
        'dropout': 0.1,
        'pretrain_epochs': 2,
        'main_epochs': 10,
        'inner_steps': 100,
        't_update_every': None,
        'implicit_steps': 1,
        'epsilon': 0.1,
        'norm_target': 1.0,
        'seed': 0,
        'mode': 'both',
        'embed_dim': 32,
        'feature_dim': 32,
        'feature_mode': 'relational',
        'w_prime_init': 'verbatim',
        'keep_weighting': 'posterior',
        'q_floor': 1e-8,
    },
    'synthetic': {
        'num_classes': 5,
        'vocab_size': 200,
        'seq_len': 20,
        'num_instances': 10000,
        'signal_strength': 0.6,
        'signal_tokens_per_class': 4,
        'max_bag_size': 3,
        'seed': 0,
    },
    'evaluation': {
        'na_class': 0,
        'p_at_n': [100, 200, 300, 1000],
        'against': 'true',
    },
    'logging': {
        'level': 'INFO',
        'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
    },
}


class ConfigLoader:
    """Handles loading and accessing configuration settings."""

    def __init__(self, config_path: Optional[str] = None):
        """
        Initialize configuration loader.

        Args:
            config_path: Path to config file. If None, uses config.yaml at the repository root.
        """
        if config_path is None:
            config_path = Path(__file__).resolve().parent.parent / "config.yaml"

        self.config_path = Path(config_path)
        self.config = self._load_config()

    def _load_config(self) -> Dict[str, Any]:
        """Load configuration from YAML file."""
        if not self.config_path.exists():
            logger.warning(f"Config file not found: {self.config_path}; writing defaults")
            self._create_default_config()

        try:
            with open(self.config_path, 'r') as f:
                config = yaml.safe_load(f)
                return config or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {self.config_path}: {e}") from e

    def _create_default_config(self):
        """Create a default configuration file."""
        self.config_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.config_path, 'w') as f:
            yaml.dump(DEFAULT_CONFIG, f, default_flow_style=False, indent=2, sort_keys=False)

    def get(self, key: str, default: Any = None) -> Any:
        """Get configuration value by dotted key."""
        keys = key.split('.')
        value = self.config

        for k in keys:
            if isinstance(value, dict) and k in value:
                value = value[k]
            else:
                return default

        return value

    def get_section(self, section: str) -> Dict[str, Any]:
        """Get a section merged over its built-in defaults."""
        merged = dict(DEFAULT_CONFIG.get(section, {}))
        merged.update(self.get(section, {}) or {})
        return merged


def load_training_overrides(path: str) -> Dict[str, Any]:
    """Read a user training config: a flat TrainConfig mapping or a file with a `training:` section."""
    config_path = Path(path)
    if not config_path.is_file():
        raise FileNotFoundError(f"Config file not found: {config_path}")
    with open(config_path, 'r') as f:
        try:
            data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {config_path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{config_path} must hold a mapping")
    if isinstance(data.get('training'), dict):
        return dict(data['training'])
    return data


def get_output_dir(explicit: Optional[str] = None) -> Optional[str]:
    """Resolve an output directory: explicit flag first, then the environment default."""
    return explicit or os.environ.get(OUTPUT_DIR_ENV)


def configure_logging(level: str = 'INFO', fmt: Optional[str] = None):
    """Configure root logging once for a CLI invocation."""
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format=fmt or DEFAULT_CONFIG['logging']['format'],
    )
