"""
Run configuration files.

Flat `section.key = value` lines; `#` starts a comment line. Every key has a
default, unknown or repeated keys are rejected with their line number, and
serialize_config writes a file that parses back to an identical RunConfig.
"""

import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

from clan.attention import UPSAMPLE_MODES, ClsaPooling, Gate, RelationMetric
from clan.backbone import BackboneConfig
from clan.data import SyntheticSpec
from clan.errors import ConfigError, ConfigurationError
from clan.model import MIDDLE_MODES, ModelConfig

logger = logging.getLogger(__name__)

PRECISION_ENV_VAR = 'CLAN_PRECISION'
PRECISIONS = ('f32', 'f64')


@dataclass
class OptimConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 30
    gamma: float = 0.5
    step_epochs: int = 10

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based `epoch`: lr · γ^(epoch // step_epochs)."""
        return self.lr * self.gamma ** (epoch // self.step_epochs)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    seed: int = 0
    precision: str = 'f64'
    output_dir: str = 'runs/desk'
    cache_dir: str = ''

    def validate(self) -> None:
        try:
            self.model.validate()
            self.data.validate()
        except ConfigurationError as e:
            raise ConfigError(str(e)) from None
        if self.model.backbone.input_size != self.data.image_size:
            raise ConfigError(
                f"model.input_size ({self.model.backbone.input_size}) must equal "
                f"data.image_size ({self.data.image_size})"
            )
        if self.model.num_classes != self.data.num_classes:
            raise ConfigError("model and data disagree on the number of classes")


# ---------------------------------------------------------------------------
# Value codecs
# ---------------------------------------------------------------------------


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ('true', 'yes', '1', 'on'):
        return True
    if lowered in ('false', 'no', '0', 'off'):
        return False
    raise ValueError(f"expected true/false, got '{text}'")


def _parse_int_list(text: str) -> List[int]:
    return [int(part) for part in text.split(',') if part.strip()]


def _parse_float_list(text: str) -> Optional[List[float]]:
    values = [float(part) for part in text.split(',') if part.strip()]
    return values or None


def _checked(parse: Callable[[str], Any], check: Callable[[Any], bool], what: str):
    def parser(text: str) -> Any:
        value = parse(text)
        if not check(value):
            raise ValueError(f"expected {what}, got '{text}'")
        return value
    return parser


def _choice(options: Tuple[str, ...]) -> Callable[[str], str]:
    def parser(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {list(options)}, got '{text}'")
        return text
    return parser


def _enum(kind: type) -> Callable[[str], Enum]:
    def parser(text: str) -> Enum:
        try:
            return kind(text)
        except ValueError:
            raise ValueError(
                f"expected one of {[m.value for m in kind]}, got '{text}'"
            ) from None
    return parser


def _format(value: Any) -> str:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ', '.join(_format(v) for v in value)
    if value is None:
        return ''
    return str(value)


_positive_int = _checked(int, lambda v: v > 0, 'a positive integer')
_nonneg_int = _checked(int, lambda v: v >= 0, 'a non-negative integer')
_nonneg_float = _checked(float, lambda v: v >= 0, 'a non-negative number')
_positive_float = _checked(float, lambda v: v > 0, 'a positive number')

# key -> (attribute path inside RunConfig, parser)
FIELDS: Dict[str, Tuple[Tuple[str, ...], Callable[[str], Any]]] = {
    'model.stage_channels': (('model', 'backbone', 'stage_channels'), _parse_int_list),
    'model.stage_blocks': (('model', 'backbone', 'stage_blocks'), _parse_int_list),
    'model.input_size': (('model', 'backbone', 'input_size'), _positive_int),
    'model.tap_stages': (('model', 'backbone', 'tap_stages'), _parse_int_list),
    'model.top_stage': (('model', 'backbone', 'top_stage'), _positive_int),
    'model.middle': (('model', 'middle'), _choice(MIDDLE_MODES)),
    'model.clsa': (('model', 'clsa'), _parse_bool),
    'model.metric': (('model', 'metric'), _enum(RelationMetric)),
    'model.pooling': (('model', 'pooling'), _enum(ClsaPooling)),
    'model.gate': (('model', 'gate'), _enum(Gate)),
    'model.c_int': (('model', 'c_int'), _nonneg_int),
    'model.upsample': (('model', 'upsample_mode'), _choice(UPSAMPLE_MODES)),
    'model.branch_weights': (('model', 'branch_weights'), _parse_float_list),
    'optim.lr': (('optim', 'lr'), _nonneg_float),
    'optim.momentum': (('optim', 'momentum'), _nonneg_float),
    'optim.weight_decay': (('optim', 'weight_decay'), _nonneg_float),
    'optim.batch_size': (('optim', 'batch_size'), _positive_int),
    'optim.epochs': (('optim', 'epochs'), _positive_int),
    'optim.gamma': (('optim', 'gamma'), _positive_float),
    'optim.step_epochs': (('optim', 'step_epochs'), _positive_int),
    'data.num_classes': (('data', 'num_classes'), _positive_int),
    'data.image_size': (('data', 'image_size'), _positive_int),
    'data.base_shapes': (('data', 'base_shapes'), _positive_int),
    'data.patch_size': (('data', 'patch_size'), _nonneg_int),
    'data.noise_std': (('data', 'noise_std'), _nonneg_float),
    'data.samples_per_class': (('data', 'samples_per_class'), _positive_int),
    'data.test_samples_per_class': (('data', 'test_samples_per_class'), _positive_int),
    'data.seed': (('data', 'seed'), _nonneg_int),
    'data.cache_dir': (('cache_dir',), str),
    'run.seed': (('seed',), _nonneg_int),
    'run.precision': (('precision',), _choice(PRECISIONS)),
    'run.output_dir': (('output_dir',), str),
}


def _get(config: RunConfig, path: Tuple[str, ...]) -> Any:
    target: Any = config
    for attr in path:
        target = getattr(target, attr)
    return target


def _set(config: RunConfig, path: Tuple[str, ...], value: Any) -> None:
    target: Any = config
    for attr in path[:-1]:
        target = getattr(target, attr)
    setattr(target, path[-1], value)


def default_config() -> RunConfig:
    config = RunConfig(model=ModelConfig(backbone=BackboneConfig()))
    config.model.num_classes = config.data.num_classes
    return config


def parse_config(text: str) -> RunConfig:
    """Parse config text over the defaults. Raises ConfigError with line numbers."""
    config = default_config()
    seen: Dict[str, int] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith('#'):
            continue
        if '=' not in line:
            raise ConfigError(f"expected 'section.key = value', got '{line}'", line=number)
        key, value = (part.strip() for part in line.split('=', 1))
        if key not in FIELDS:
            raise ConfigError(f"unknown key '{key}'", line=number)
        if key in seen:
            raise ConfigError(f"duplicate key '{key}' (first set on line {seen[key]})", line=number)
        seen[key] = number
        path, parser = FIELDS[key]
        try:
            _set(config, path, parser(value))
        except ValueError as e:
            raise ConfigError(f"bad value for '{key}': {e}", line=number) from None

    config.model.num_classes = config.data.num_classes
    config.validate()
    return config


def serialize_config(config: RunConfig) -> str:
    lines = ['# CLAN run configuration']
    section = None
    for key, (path, _) in FIELDS.items():
        current = key.split('.', 1)[0]
        if current != section:
            lines.append('')
            section = current
        lines.append(f"{key} = {_format(_get(config, path))}")
    return '\n'.join(lines) + '\n'


def apply_env_overrides(config: RunConfig) -> RunConfig:
    """CLAN_PRECISION (f32|f64) overrides run.precision."""
    override = os.getenv(PRECISION_ENV_VAR)
    if override:
        if override not in PRECISIONS:
            raise ConfigError(
                f"{PRECISION_ENV_VAR} must be one of {list(PRECISIONS)}, got '{override}'"
            )
        if override != config.precision:
            logger.info(f"{PRECISION_ENV_VAR}={override} overrides run.precision={config.precision}")
        config.precision = override
    return config


def load_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        text = path.read_text(encoding='utf-8')
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read {path}: {e}") from None
    return apply_env_overrides(parse_config(text))
