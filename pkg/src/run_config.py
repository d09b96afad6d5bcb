# src/run_config.py
"""
AdvMetric - Run Configuration
Trainer, loss and attack settings, named presets, and the sectioned
``key = value`` config file format
"""

import configparser
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import jsonschema

from attacks import INVARIANCE, SENSITIVITY, AttackConfig
from errors import ConfigError
from metric_losses import LossConfig

logger = logging.getLogger(__name__)

CONFIG_KINDS = ('baseline', 'mls', 'mls+mli')

_NUMBER = {'type': 'number'}
_POS_INT = {'type': 'integer', 'minimum': 1}
_OPT_LIMIT = {'type': ['integer', 'null'], 'minimum': 1}

CONFIG_SCHEMA = {
    'type': 'object',
    'additionalProperties': False,
    'properties': {
        'trainer': {
            'type': 'object',
            'additionalProperties': False,
            'properties': {
                'preset': {'type': 'string'},
                'kind': {'enum': list(CONFIG_KINDS)},
                'epochs': _POS_INT,
                'batch_size': _POS_INT,
                'learning_rate': {'type': 'number', 'exclusiveMinimum': 0},
                'momentum': {'type': 'number', 'minimum': 0, 'exclusiveMaximum': 1},
                'seeds': {'type': 'array', 'items': {'type': 'integer', 'minimum': 0}, 'minItems': 1},
                'train_limit': _OPT_LIMIT,
                'test_limit': _OPT_LIMIT,
                'mix_adversarial_ce': {'type': 'boolean'},
            },
        },
        'loss': {
            'type': 'object',
            'additionalProperties': False,
            'properties': {
                'lambda1': _NUMBER,
                'lambda2': _NUMBER,
                'lambda3': _NUMBER,
                'margin': _NUMBER,
                'eps_div': _NUMBER,
            },
        },
        'attack': {
            'type': 'object',
            'additionalProperties': False,
            'properties': {
                'sensitivity_epsilon': _NUMBER,
                'invariance_epsilon': _NUMBER,
                'oracle_k': _POS_INT,
                'oracle_tau': _NUMBER,
                'shift_radius': {'type': 'integer', 'minimum': 0},
                'shortlist': _POS_INT,
                'workers': _POS_INT,
                'block_size': _POS_INT,
            },
        },
    },
}


@dataclass
class TrainConfig:
    """Everything one training configuration needs"""
    kind: str = 'mls+mli'
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 0.01
    momentum: float = 0.9
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    train_limit: Optional[int] = None
    test_limit: Optional[int] = None
    mix_adversarial_ce: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    sensitivity: AttackConfig = field(default_factory=lambda: AttackConfig.for_kind(SENSITIVITY))
    invariance: AttackConfig = field(default_factory=lambda: AttackConfig.for_kind(INVARIANCE))
    out_dir: str = 'out'

    def __post_init__(self):
        if self.kind not in CONFIG_KINDS:
            raise ConfigError(f"trainer.kind must be one of {CONFIG_KINDS}, got '{self.kind}'")
        self.learning_rate = float(self.learning_rate)
        self.momentum = float(self.momentum)
        self.seeds = [int(s) for s in self.seeds]

    @property
    def effective_loss(self) -> LossConfig:
        """Loss coefficients after the per-kind forcing rules"""
        if self.kind == 'baseline':
            return replace(self.loss, lambda1=0.0, lambda2=0.0, lambda3=0.0)
        if self.kind == 'mls':
            return replace(self.loss, lambda2=0.0)
        return self.loss

    @property
    def needs_invariance(self) -> bool:
        return self.effective_loss.lambda2 > 0

    def with_kind(self, kind: str) -> "TrainConfig":
        return replace(self, kind=kind)

    def to_dict(self) -> Dict[str, Any]:
        """Hashable description; out_dir is excluded so relocating a run keeps its hash"""
        data = asdict(self)
        data.pop('out_dir')
        data['loss'] = self.effective_loss.to_dict()
        return data


class RunConfigManager:
    """Named presets and config-file loading"""

    PRESETS: Dict[str, Dict[str, Dict[str, Any]]] = {
        # seconds; synthetic data is fine
        'smoke': {
            'trainer': {'epochs': 1, 'batch_size': 64, 'seeds': [0], 'train_limit': 512, 'test_limit': 128},
            'attack': {'shortlist': 16},
        },
        # minutes per run on a laptop
        'desk': {
            'trainer': {'epochs': 3, 'train_limit': 10000, 'test_limit': 2000},
        },
        'full': {},
    }

    @classmethod
    def preset_names(cls) -> Tuple[str, ...]:
        return tuple(cls.PRESETS)

    @classmethod
    def get_preset(cls, name: str, out_dir: str = 'out') -> TrainConfig:
        if name not in cls.PRESETS:
            raise ConfigError(f"unknown preset '{name}' (known: {', '.join(cls.PRESETS)})")
        return cls.from_sections(cls.PRESETS[name], out_dir=out_dir)

    @classmethod
    def from_sections(cls, sections: Dict[str, Dict[str, Any]], out_dir: str = 'out') -> TrainConfig:
        """Build a TrainConfig from validated section dicts, on top of the named preset if any"""
        try:
            jsonschema.validate(sections, CONFIG_SCHEMA)
        except jsonschema.ValidationError as e:
            where = '.'.join(str(p) for p in e.absolute_path) or 'config'
            raise ConfigError(f"invalid config at {where}: {e.message}")

        trainer = dict(sections.get('trainer', {}))
        base_name = trainer.pop('preset', None)
        if base_name is not None:
            if base_name not in cls.PRESETS:
                raise ConfigError(f"unknown preset '{base_name}' (known: {', '.join(cls.PRESETS)})")
            base = cls.PRESETS[base_name]
            merged = {section: {**base.get(section, {}), **sections.get(section, {})}
                      for section in ('trainer', 'loss', 'attack')}
            merged['trainer'].pop('preset', None)
            return cls.from_sections(merged, out_dir=out_dir)

        attack = dict(sections.get('attack', {}))
        shared = {k: attack[k] for k in ('oracle_k', 'oracle_tau', 'shift_radius', 'shortlist', 'workers', 'block_size')
                  if k in attack}
        sensitivity = AttackConfig.for_kind(SENSITIVITY, **shared, **(
            {'epsilon': attack['sensitivity_epsilon']} if 'sensitivity_epsilon' in attack else {}))
        invariance = AttackConfig.for_kind(INVARIANCE, **shared, **(
            {'epsilon': attack['invariance_epsilon']} if 'invariance_epsilon' in attack else {}))

        cfg = TrainConfig(
            loss=LossConfig(**sections.get('loss', {})),
            sensitivity=sensitivity,
            invariance=invariance,
            out_dir=out_dir,
            **trainer,
        )
        if cfg.kind != 'mls+mli' and cfg.effective_loss != cfg.loss:
            logger.warning("kind '%s' forces loss coefficients to %s", cfg.kind, cfg.effective_loss)
        return cfg

    @classmethod
    def load(cls, path: str, out_dir: str = 'out') -> TrainConfig:
        """Parse a sectioned ``key = value`` file; unknown sections or keys are errors"""
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=('#', ';'))
        parser.optionxform = str
        try:
            parser.read(path)
        except configparser.Error as e:
            raise ConfigError(f"cannot parse {path}: {e}")
        sections = {
            name: {key: _coerce(key, value) for key, value in parser.items(name)}
            for name in parser.sections()
        }
        return cls.from_sections(sections, out_dir=out_dir)


def _coerce(key: str, text: str) -> Any:
    """Turn a config value into the JSON type the schema expects"""
    text = text.strip()
    if key == 'seeds':
        try:
            return [int(part) for part in text.replace(',', ' ').split()]
        except ValueError:
            raise ConfigError(f"seeds must be a list of integers, got '{text}'")
    lowered = text.lower()
    if lowered in ('true', 'yes', 'on'):
        return True
    if lowered in ('false', 'no', 'off'):
        return False
    if lowered in ('none', ''):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def dump_config(cfg: TrainConfig, path: str):
    """Write a config file that loads back to ``cfg``"""
    loss = cfg.loss
    lines = [
        '[trainer]',
        f'kind = {cfg.kind}',
        f'epochs = {cfg.epochs}',
        f'batch_size = {cfg.batch_size}',
        f'learning_rate = {cfg.learning_rate!r}',
        f'momentum = {cfg.momentum!r}',
        f"seeds = {', '.join(str(s) for s in cfg.seeds)}",
        f'train_limit = {cfg.train_limit}',
        f'test_limit = {cfg.test_limit}',
        f'mix_adversarial_ce = {str(cfg.mix_adversarial_ce).lower()}',
        '',
        '[loss]',
        f'lambda1 = {loss.lambda1!r}',
        f'lambda2 = {loss.lambda2!r}',
        f'lambda3 = {loss.lambda3!r}',
        f'margin = {loss.margin!r}',
        f'eps_div = {loss.eps_div!r}',
        '',
        '[attack]',
        f'sensitivity_epsilon = {cfg.sensitivity.epsilon!r}',
        f'invariance_epsilon = {cfg.invariance.epsilon!r}',
        f'oracle_k = {cfg.invariance.oracle_k}',
        f'oracle_tau = {cfg.invariance.oracle_tau!r}',
        f'shift_radius = {cfg.invariance.shift_radius}',
        f'shortlist = {cfg.invariance.shortlist}',
        f'workers = {cfg.invariance.workers}',
        f'block_size = {cfg.invariance.block_size}',
    ]
    with open(path, 'w') as f:
        f.write('\n'.join(lines) + '\n')


if __name__ == "__main__":
    print("🔧 Testing AdvMetric run configuration...")
    for name in RunConfigManager.preset_names():
        cfg = RunConfigManager.get_preset(name)
        print(f"   {name}: epochs={cfg.epochs}, batch_size={cfg.batch_size}, seeds={cfg.seeds}, "
              f"train_limit={cfg.train_limit}")
    print("✅ Configuration system operational!")
