"""Flat ``section.key = value`` experiment configuration.

Every setting of an experiment lives in one text file::

    seed = 1
    out_dir = runs/rgb
    data.num_classes = 6
    render.background = rgb_frame
    optim.base_lr = 0.05
    distill.teachers = flow:runs/flow/model.ckpt,pose:runs/pose/model.ckpt

Lists are comma separated, ``none`` stands for an unset optional value
and ``#`` starts a comment line. Unknown keys are rejected.
"""

# import modules
import dataclasses
import logging
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .backbone import BackboneConfig
from .dataset import AugmentConfig, SyntheticSpec
from .exceptions import ConfigError, IoError
from .optical_flow import FlowParams
from .pose_render import RenderSpec
from .training import (MODALITY_CHANNELS, DistillConfig, OptimConfig,
                       TeacherSpec)

logger = logging.getLogger(__name__)

PRESETS = ('tiny', 'r3d50')
RESOLVED_NAME = 'config.resolved.txt'
# keys derived from the root seed rather than set per section
_SEEDED = ('seed',)


@dataclass(frozen=True)
class ModelSection:
    """Backbone choice; the class count and input channels follow the
    dataset and the stream modality."""
    preset: str = 'tiny'
    gating_enabled: bool = True
    gating_per_cell: bool = False
    norm: str = 'batch'
    block_style: str = 'bottleneck'

    def __post_init__(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"'model.preset' should be one of {PRESETS}.")


@dataclass(frozen=True)
class TrainSection:
    """Stream modality and clip handling of a run."""
    modality: str = 'rgb'
    clip_length: Optional[int] = None
    augment: bool = True
    pad: str = 'last'
    eval_batch_size: int = 8

    def __post_init__(self) -> None:
        if self.modality not in MODALITY_CHANNELS:
            raise ConfigError(f"'train.modality' should be one of "
                              f"{tuple(MODALITY_CHANNELS)}.")
        if self.pad not in ('last', 'first'):
            raise ConfigError("'train.pad' should be 'last' or 'first'.")
        if self.clip_length is not None and self.clip_length < 1:
            raise ConfigError("'train.clip_length' should be positive.")
        if self.eval_batch_size < 1:
            raise ConfigError("'train.eval_batch_size' should be positive.")


@dataclass(frozen=True)
class DistillSection:
    """Distillation settings; teachers are ``modality:checkpoint``
    entries."""
    teachers: tuple = ()
    mode: str = 'separate'
    distill_weight: float = 1.0
    cache_teacher_logits: bool = False

    def __post_init__(self) -> None:
        for entry in self.teachers:
            modality, _, path = entry.partition(':')
            if modality not in MODALITY_CHANNELS or not path:
                raise ConfigError(f"teacher '{entry}' should read "
                                  f"'<modality>:<checkpoint>'.")


SECTIONS = {
    'data': SyntheticSpec,
    'render': RenderSpec,
    'flow': FlowParams,
    'model': ModelSection,
    'optim': OptimConfig,
    'augment': AugmentConfig,
    'train': TrainSection,
    'distill': DistillSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    """
    All settings of an experiment.

    Attributes
    ----------
    seed : int
        The root seed; data generation, initialisation, batch order and
        augmentation draw from named streams of it.
    out_dir : str
        Where a run writes its artifacts.
    data_root : str
        Where the dataset is written and read.
    """
    seed: int = 0
    out_dir: str = 'runs'
    data_root: str = 'data'
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    render: RenderSpec = field(default_factory=RenderSpec)
    flow: FlowParams = field(default_factory=FlowParams)
    model: ModelSection = field(default_factory=ModelSection)
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainSection = field(default_factory=TrainSection)
    distill: DistillSection = field(default_factory=DistillSection)

    def __post_init__(self) -> None:
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) \
                or self.seed < 0:
            raise ConfigError("'seed' should be a non-negative integer.")
        # the root seed wins over per-section seeds
        if self.data.seed != self.seed:
            object.__setattr__(self, 'data',
                               dataclasses.replace(self.data, seed=self.seed))
        if self.optim.seed != self.seed:
            object.__setattr__(self, 'optim', dataclasses.replace(
                self.optim, seed=self.seed))

    # ~~~~~ derived settings ~~~~~
    def backbone_for(self, modality) -> BackboneConfig:
        """The backbone of a stream of ``modality``."""
        if modality not in MODALITY_CHANNELS:
            raise ConfigError(f"unknown modality '{modality}'.")
        preset = getattr(BackboneConfig, self.model.preset)
        return preset(num_classes=self.data.num_classes,
                      input_channels=MODALITY_CHANNELS[modality],
                      gating_enabled=self.model.gating_enabled,
                      gating_per_cell=self.model.gating_per_cell,
                      norm=self.model.norm,
                      block_style=self.model.block_style)

    def distill_config(self) -> DistillConfig:
        """The teachers and loss mode of a distillation run."""
        teachers = []
        for entry in self.distill.teachers:
            modality, _, path = entry.partition(':')
            teachers.append(TeacherSpec(modality, path,
                                        self.backbone_for(modality)))
        return DistillConfig(tuple(teachers), self.distill.mode,
                             self.distill.distill_weight,
                             self.distill.cache_teacher_logits)

    @property
    def clip_length(self) -> int:
        return self.train.clip_length or self.data.clip_length

    # ~~~~~ text form ~~~~~
    def items(self) -> list:
        """Every ``(key, value)`` pair in file order."""
        pairs = [('seed', self.seed), ('out_dir', self.out_dir),
                 ('data_root', self.data_root)]
        for section in SECTIONS:
            values = getattr(self, section)
            for item in dataclasses.fields(values):
                if item.name in _SEEDED:
                    continue
                pairs.append((f'{section}.{item.name}',
                              getattr(values, item.name)))
        return pairs

    def to_text(self) -> str:
        """The resolved configuration, parseable by :meth:`from_text`."""
        return '\n'.join(f'{key} = {format_value(value)}'
                         for key, value in self.items()) + '\n'

    @classmethod
    def from_text(cls, text, overrides=None) -> 'ExperimentConfig':
        """
        Parse a configuration; missing keys keep their defaults.

        Parameters
        ----------
        text : str
            The ``key = value`` lines.
        overrides : dict, optional
            ``{key: text value}`` applied after the file.

        Raises
        ------
        ConfigError
            On malformed lines, unknown or repeated keys and invalid
            values.
        """
        values = {}
        for number, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            key, sep, value = line.partition('=')
            if not sep:
                raise ConfigError(f"line {number}: expected 'key = value'.")
            key = key.strip()
            if key in values:
                raise ConfigError(f"line {number}: '{key}' is set twice.")
            values[key] = value.strip()
        values.update(overrides or {})
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values) -> 'ExperimentConfig':
        """Build a configuration from ``{key: text value}``."""
        hints = typing.get_type_hints(cls)
        top, sections = {}, {name: {} for name in SECTIONS}
        for key, text in values.items():
            section, dot, name = key.partition('.')
            if not dot:
                if key not in ('seed', 'out_dir', 'data_root'):
                    raise ConfigError(f"unknown key '{key}'.")
                top[key] = parse_value(text, hints[key], key)
                continue
            if section not in SECTIONS:
                raise ConfigError(f"unknown key '{key}'.")
            target = SECTIONS[section]
            names = {f.name for f in dataclasses.fields(target)}
            if name not in names or name in _SEEDED:
                raise ConfigError(f"unknown key '{key}'.")
            hint = typing.get_type_hints(target)[name]
            sections[section][name] = parse_value(text, hint, key,
                                                  _default(target, name))
        try:
            built = {name: SECTIONS[name](**kwargs)
                     for name, kwargs in sections.items()}
        except TypeError as err:
            raise ConfigError(str(err)) from err
        return cls(**top, **built)

    @classmethod
    def load(cls, path=None, overrides=None) -> 'ExperimentConfig':
        """Read a configuration file (defaults only when ``path`` is
        None)."""
        if path is None:
            return cls.from_text('', overrides)
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as err:
            raise IoError(f'cannot read config {path}: {err}') from err
        return cls.from_text(text, overrides)

    def save(self, directory) -> Path:
        """Write ``config.resolved.txt`` into ``directory``."""
        path = Path(directory) / RESOLVED_NAME
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(self.to_text())
        except OSError as err:
            raise IoError(f'cannot write {path}: {err}') from err
        logger.debug('resolved configuration written to %s', path)
        return path


def _default(target, name):
    for item in dataclasses.fields(target):
        if item.name == name:
            if item.default is not dataclasses.MISSING:
                return item.default
            if item.default_factory is not dataclasses.MISSING:
                return item.default_factory()
    return None


def format_value(value) -> str:
    """Text form of a configuration value."""
    if value is None:
        return 'none'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (tuple, list)):
        return ','.join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _scalar(text, kind, key):
    if kind is bool:
        lowered = text.lower()
        if lowered in ('true', 'yes', '1'):
            return True
        if lowered in ('false', 'no', '0'):
            return False
        raise ConfigError(f"'{key}' should be true or false, got '{text}'.")
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f"'{key}' should be {kind.__name__}, got "
                          f"'{text}'.") from None


def parse_value(text, hint, key, default=None):
    """
    Parse the text of ``key`` according to its annotation.

    Raises
    ------
    ConfigError
        If the text does not fit the type.
    """
    text = text.strip()
    if typing.get_origin(hint) is typing.Union:
        if text.lower() in ('none', ''):
            return None
        hint = next(arg for arg in typing.get_args(hint)
                    if arg is not type(None))
    if hint is tuple:
        if not text:
            return ()
        parts = [part.strip() for part in text.split(',')]
        if default:
            kinds = [type(v) for v in default]
            if len(kinds) == len(parts):
                return tuple(_scalar(p, k, key) for p, k in zip(parts,
                                                                kinds))
            return tuple(_scalar(p, kinds[0], key) for p in parts)
        return tuple(parts)
    if hint in (bool, int, float, str):
        return _scalar(text, hint, key)
    raise ConfigError(f"'{key}' has an unsupported type {hint}.")
