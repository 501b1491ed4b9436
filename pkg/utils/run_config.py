"""
Run Configuration Module
Flat YAML run configs: defaults, file overrides, flag overrides and the resolved echo
"""

import logging
from collections.abc import Mapping
from pathlib import Path

import yaml

from core.denoiser import (
    ENHANCER_POSITIONS,
    INSTANCE_FUSIONS,
    MOTION_FUSIONS,
    STAGES,
    DenoiserConfig,
    OptimizerConfig,
)
from core.diffusion import make_schedule
from core.errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULTS_PATH = Path(__file__).resolve().parent.parent / 'config' / 'defaults.yaml'
RESOLVED_NAME = 'run_config.yaml'

ENUM_KEYS = {
    'stage': STAGES,
    'enhancer_position': ENHANCER_POSITIONS,
    'instance_fusion': INSTANCE_FUSIONS,
    'motion_fusion': MOTION_FUSIONS,
}

# RunConfig key -> DenoiserConfig field, for keys copied through unchanged
DENOISER_KEYS = (
    'frames', 'dim', 'n_blocks', 'n_encoder_blocks', 'n_heads', 'mlp_ratio', 'stage',
    'enhancer_position', 'instance_fusion', 'motion_fusion', 'use_instance_embedding',
    'use_enhancer', 'use_motion', 'n_freq', 'roi_size', 'k_max', 'n_categories',
)
OPTIMIZER_KEYS = ('lr', 'momentum', 'grad_clip', 'batch_size', 'cond_drop', 'log_every')

_TRUE = {'true', 'yes', 'on', '1'}
_FALSE = {'false', 'no', 'off', '0'}


class RunConfig(Mapping):
    """Immutable resolved configuration; keys are also attributes (cfg.seed)."""

    def __init__(self, values):
        object.__setattr__(self, '_values', dict(values))

    def __getitem__(self, key):
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def __getattr__(self, key):
        try:
            return self._values[key]
        except KeyError:
            raise AttributeError(key) from None

    def __setattr__(self, key, value):
        raise AttributeError("RunConfig is immutable")

    def __repr__(self):
        return f"RunConfig({self._values!r})"

    def replace(self, **overrides):
        """A copy with some keys changed (same validation as resolve_config)"""
        return RunConfig(_apply(self._values, overrides, 'override'))


def _read_yaml(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, encoding='utf-8') as file:
            data = yaml.safe_load(file)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a flat key-value mapping")
    return data


def load_defaults():
    """Documented keys and their defaults from config/defaults.yaml"""
    return _read_yaml(DEFAULTS_PATH)


def _coerce(key, value, default):
    kind = type(default)
    try:
        if kind is bool:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in _TRUE:
                return True
            if text in _FALSE:
                return False
            raise ValueError(value)
        if kind is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if kind is float:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot read {value!r} as {kind.__name__}") from None


def _apply(base, overrides, source):
    values = dict(base)
    for key, value in overrides.items():
        if key not in values:
            raise ConfigError(f"unknown config key '{key}' (from {source})")
        if value is None:
            continue
        values[key] = _coerce(key, value, values[key])
    for key, allowed in ENUM_KEYS.items():
        if values[key] not in allowed:
            raise ConfigError(f"{key} must be one of {allowed}, got {values[key]!r}")
    return values


def resolve_config(path=None, overrides=None):
    """
    Merge defaults <- config file <- overrides.

    Args:
        path: Optional YAML file of overrides
        overrides: dict of flag values; None entries are ignored

    Returns:
        RunConfig

    Raises:
        ConfigError: unknown key, uncoercible value or bad enumerated choice
    """
    values = load_defaults()
    if path is not None:
        values = _apply(values, _read_yaml(path), str(path))
    values = _apply(values, overrides or {}, 'flags')
    logger.debug("resolved config: %s", values)
    return RunConfig(values)


def write_resolved(cfg, out_dir):
    """Write run_config.yaml (sorted keys) into out_dir and return its path"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_NAME
    with open(path, 'w', encoding='utf-8') as file:
        yaml.safe_dump(dict(cfg), file, sort_keys=True, default_flow_style=False)
    return path


# ============================================================================
# DERIVED CONFIGS
# ============================================================================

def denoiser_config(cfg):
    """
    DenoiserConfig for the latent grid produced by the patchify codec.

    Raises:
        ConfigError: frame size not divisible by the patch edge
    """
    if cfg.patch < 1 or cfg.height % cfg.patch or cfg.width % cfg.patch:
        raise ConfigError(f"frame size {cfg.width}x{cfg.height} is not divisible by patch {cfg.patch}")
    values = {key: cfg[key] for key in DENOISER_KEYS}
    values.update(
        height=cfg.height // cfg.patch,
        width=cfg.width // cfg.patch,
        channels=3 * cfg.patch * cfg.patch,
    )
    return DenoiserConfig(**values)


def optimizer_config(cfg):
    return OptimizerConfig(**{key: cfg[key] for key in OPTIMIZER_KEYS})


def noise_schedule(cfg):
    return make_schedule(cfg.train_steps, cfg.beta_start, cfg.beta_end)
