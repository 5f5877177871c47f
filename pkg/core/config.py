"""
Configuration Manager - Loads, validates and manages YAML configuration
"""
import copy
import yaml
from pathlib import Path
from typing import Any, Dict, Optional
from core.analysis import AnalysisConfig
from core.corpus import ToyCorpusConfig
from core.errors import ConfigError, DataError
from core.platform_utils import get_config_dir, CONFIG_NAME
from core.prosody import CwtConfig
from core.vawgan import ModelConfig, TrainConfig

# Keys whose value may be null
NULLABLE = {'training.steps', 'logging.log_dir'}

DEFAULT_CONFIG = {
    'analysis': {
        'sample_rate': 16000,
        'frame_ms': 25.0,
        'hop_ms': 5.0,
        'window': 'hann',
        'fft_size': 1024,
        'lifter_order': 40,
        'f0_floor': 50.0,
        'f0_ceil': 600.0,
        'voicing_threshold': 0.15,
        'mcep_order': 24,
        'mcep_alpha': 0.42,
        'allow_rate_passthrough': False
    },
    'prosody': {
        'num_scales': 10,
        'tau0_hops': 2.0,
        'min_frames': 16,
        'weight_offset': 2.5,
        'weight_power': 2.5,
        'context_frames': 1
    },
    'model': {
        'feature_dim': 513,
        'latent_dim': 128,
        'num_emotions': 10,
        'use_f0_condition': True,
        'encoder_channels': [16, 32, 64, 128, 256],
        'encoder_kernel': 7,
        'encoder_stride': 3,
        'seed_channels': 64,
        'generator_channels': [32, 16, 8, 1],
        'generator_kernels': [9, 7, 7, 1025],
        'generator_strides': [3, 3, 3, 1],
        'discriminator_channels': [16, 32, 64],
        'discriminator_kernels': [7, 7, 115],
        'discriminator_stride': 3,
        'lrelu_slope': 0.2
    },
    # Desk profile values; 'paper' is the corpus-scale preset
    'training': {
        'lr': 1.0e-3,
        'batch': 32,
        'epochs': 45,
        'steps': 600,
        'n_critic': 5,
        'clip_c': 0.01,
        'lambda_adv': 1.0,
        'lambda_kl': 0.01,
        'rmsprop_decay': 0.9,
        'log_interval': 50,
        'energy_gate_db': -60.0,
        'seed': 0
    },
    'profiles': {
        'desk': {
            'lr': 1.0e-3,
            'batch': 32,
            'steps': 600,
            'lambda_kl': 0.01
        },
        'paper': {
            'lr': 1.0e-5,
            'batch': 256,
            'epochs': 45,
            'steps': None,
            'lambda_kl': 1.0
        }
    },
    'corpus': {
        'speakers': 2,
        'sentences': 6,
        'emotions': ['neutral', 'angry'],
        'f0_ratio': 1.4,
        'accent_gain': 1.6,
        'formant_shift': 1.08
    },
    'runtime': {
        'max_workers': 4
    },
    'logging': {
        'log_dir': None,
        'console_level': 'INFO',
        'file_level': 'DEBUG',
        'rotation': '10 MB',
        'retention': '7 days',
        'compression': 'zip'
    }
}


def _default_for(key_path: str) -> Any:
    node = DEFAULT_CONFIG
    for key in key_path.split('.'):
        node = node[key]
    return node


def _check_value(key_path: str, value: Any) -> Any:
    """Validate a value against the type of its built-in default"""
    default = _default_for(key_path)
    if value is None:
        if key_path in NULLABLE:
            return None
        raise ConfigError(f"'{key_path}' may not be null")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"'{key_path}' must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{key_path}' must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{key_path}' must be a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"'{key_path}' must be a list, got {value!r}")
        return list(value)
    if not isinstance(value, str):
        raise ConfigError(f"'{key_path}' must be text, got {value!r}")
    return value


class ConfigManager:
    """
    Manages configuration loading and access for evoconv

    Resolution order: built-in defaults, then the YAML file, then a named
    training profile, then individual overrides via set(). Unknown keys are
    rejected at every stage.
    """

    def __init__(self, config_file=None, required: bool = False):
        """
        Initialize configuration manager

        Args:
            config_file: Path to YAML configuration file (None = use platform-specific config dir)
            required: Raise if the file does not exist instead of using defaults

        Raises:
            ConfigError: unknown key, bad value type or unparseable YAML
            DataError: required file missing or unreadable
        """
        if config_file is None:
            self.config_file = get_config_dir() / CONFIG_NAME
        else:
            self.config_file = Path(config_file)

        self.required = required
        self.profile: Optional[str] = None
        self.config = self._load_config()

    def _load_config(self) -> Dict[str, Any]:
        default_config = copy.deepcopy(DEFAULT_CONFIG)

        if not self.config_file.exists():
            if self.required:
                raise DataError(f"Config file not found: {self.config_file}")
            return default_config

        try:
            with open(self.config_file, 'r', encoding='utf-8') as f:
                loaded_config = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"Cannot parse {self.config_file}: {e}") from e
        except OSError as e:
            raise DataError(f"Cannot read {self.config_file}: {e}") from e

        if loaded_config is None:
            return default_config
        if not isinstance(loaded_config, dict):
            raise ConfigError(f"{self.config_file} must hold a mapping of sections")
        return self._merge_configs(default_config, loaded_config)

    def _merge_configs(self, default: Dict, loaded: Dict, prefix: str = '') -> Dict:
        """
        Recursively merge loaded config over defaults, rejecting unknown keys

        Profiles may introduce new names; their entries must be training keys.
        """
        merged = copy.deepcopy(default)

        for key, value in loaded.items():
            key_path = f"{prefix}{key}"
            if prefix == 'profiles.':
                merged[key] = self._check_profile(key, value, merged.get(key, {}))
                continue
            if key not in merged:
                raise ConfigError(f"Unknown config key '{key_path}'")
            if isinstance(merged[key], dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"'{key_path}' must be a section")
                merged[key] = self._merge_configs(merged[key], value, f"{key_path}.")
            else:
                merged[key] = _check_value(key_path, value)

        return merged

    def _check_profile(self, name: str, values: Any, base: Dict) -> Dict:
        if not isinstance(values, dict):
            raise ConfigError(f"Profile '{name}' must be a mapping of training keys")
        checked = dict(base)
        for key, value in values.items():
            if key not in DEFAULT_CONFIG['training']:
                raise ConfigError(f"Unknown training key '{key}' in profile '{name}'")
            checked[key] = _check_value(f"training.{key}", value)
        return checked

    def get(self, key_path: str, default: Any = None) -> Any:
        """
        Get configuration value by dot-separated path

        Args:
            key_path: Dot-separated path (e.g., 'training.lr')
            default: Default value if key not found

        Returns:
            Configuration value or default
        """
        value = self.config

        for key in key_path.split('.'):
            if isinstance(value, dict) and key in value:
                value = value[key]
            else:
                return default

        return value

    def get_section(self, section: str) -> Dict[str, Any]:
        """Get entire configuration section"""
        return self.config.get(section, {})

    def set(self, key_path: str, value: Any):
        """
        Override one leaf value (command-line flags land here)

        String values are parsed as YAML scalars, so '1e-4' or 'null' work.

        Raises:
            ConfigError: unknown key or wrong type
        """
        keys = key_path.split('.')
        node = self.config
        for key in keys[:-1]:
            if not isinstance(node, dict) or key not in node:
                raise ConfigError(f"Unknown config key '{key_path}'")
            node = node[key]
        leaf = keys[-1]
        if keys[0] == 'profiles' or not isinstance(node, dict) or leaf not in node \
                or isinstance(node[leaf], dict):
            raise ConfigError(f"Unknown config key '{key_path}'")

        default = _default_for(key_path)
        if isinstance(value, str) and not isinstance(default, str):
            try:
                value = yaml.safe_load(value)
            except yaml.YAMLError as e:
                raise ConfigError(f"Cannot parse value for '{key_path}': {e}") from e
            # YAML 1.1 reads '1e-4' as text
            if isinstance(value, str) and isinstance(default, float):
                try:
                    value = float(value)
                except ValueError:
                    pass
        node[leaf] = _check_value(key_path, value)

    def apply_profile(self, name: str):
        """Merge a named training profile over the training section"""
        profiles = self.get_section('profiles')
        if name not in profiles:
            raise ConfigError(f"Unknown profile '{name}' (known: {', '.join(sorted(profiles))})")
        self.config['training'].update(profiles[name])
        self.profile = name

    def reload(self):
        """Reload configuration from file"""
        self.config = self._load_config()
        self.profile = None

    def save(self, config_file=None):
        """
        Save current configuration to file

        Raises:
            DataError: file cannot be written
        """
        output_file = Path(config_file) if config_file else self.config_file

        try:
            output_file.parent.mkdir(parents=True, exist_ok=True)
            with open(output_file, 'w', encoding='utf-8') as f:
                f.write(self.dump())
        except OSError as e:
            raise DataError(f"Failed to save config to {output_file}: {e}") from e

    def dump(self) -> str:
        """Effective configuration as YAML (written into every artifact)"""
        return yaml.safe_dump(self.config, default_flow_style=False, sort_keys=False)

    def provenance(self) -> Dict[str, str]:
        """Metadata entries recording the effective config and seed"""
        return {
            'config': self.dump(),
            'profile': self.profile or '',
            'seed': str(self.seed),
        }

    # Typed views

    @property
    def analysis(self) -> AnalysisConfig:
        return AnalysisConfig.from_mapping(self.get_section('analysis'))

    @property
    def prosody(self) -> CwtConfig:
        return CwtConfig.from_mapping(self.get_section('prosody'))

    @property
    def model(self) -> ModelConfig:
        return ModelConfig.from_mapping(self.get_section('model'))

    @property
    def training(self) -> TrainConfig:
        return TrainConfig.from_mapping(self.get_section('training'))

    @property
    def corpus(self) -> ToyCorpusConfig:
        section = dict(self.get_section('corpus'))
        analysis = self.get_section('analysis')
        for key in ('sample_rate', 'hop_ms', 'frame_ms', 'fft_size'):
            section[key] = analysis[key]
        return ToyCorpusConfig.from_mapping(section)

    @property
    def seed(self) -> int:
        """Get training seed"""
        return self.get('training.seed', 0)

    @property
    def max_workers(self) -> int:
        """Get worker count for per-utterance analysis"""
        return self.get('runtime.max_workers', 4)

    @property
    def log_dir(self) -> Optional[str]:
        """Get log directory"""
        return self.get('logging.log_dir')

    @property
    def console_log_level(self) -> str:
        """Get console log level"""
        return self.get('logging.console_level', 'INFO')

    @property
    def file_log_level(self) -> str:
        """Get file log level"""
        return self.get('logging.file_level', 'DEBUG')

    def __str__(self) -> str:
        """String representation of configuration"""
        return self.dump()
