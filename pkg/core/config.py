"""
Versioned JSON run configuration. A document looks like

    {
        "version": 1,
        "seed": 3,
        "data": {"synth": {"k": 8, "n": 4000}},
        "model": {"head": "hyperspherical", "h": 16},
        "loss": {"rau_weight": 3.0},
        "optim": {"epochs": 10}
    }

Every section is optional; see docs/config.md for the full schema.
"""
import copy
import dataclasses
import os
import typing

import simplejson

from . import errors
from . import losses
from . import model
from . import sphere

CONFIG_VERSION = 1

SEED_ENV_VAR = 'HSCALIBRATE_SEED'

HEAD_TYPES = ('hyperspherical', 'linear')


@dataclasses.dataclass(frozen=True)
class SynthConfig:
    k: int = 8
    n: int = 4000
    noise: float = 0.2
    decay: typing.Optional[float] = None
    pool_size: int = 20


@dataclasses.dataclass(frozen=True)
class DataConfig:
    train_path: typing.Optional[str] = None
    dev_path: typing.Optional[str] = None
    test_path: typing.Optional[str] = None
    synth: typing.Optional[SynthConfig] = None

    # used when dev/test paths are absent
    split: typing.Tuple[float, float, float] = (0.8, 0.1, 0.1)

    # fraction of train labels corrupted before training, dev and test stay clean
    train_noise: float = 0.0

    def __post_init__(self):
        if (self.train_path is None) == (self.synth is None):
            raise errors.ConfigError('data needs exactly one of train_path and synth')
        if len(self.split) != 3:
            raise errors.ConfigError('data.split must have 3 fractions')
        if not 0.0 <= self.train_noise <= 1.0:
            raise errors.ConfigError('data.train_noise must be in [0, 1]')


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    head: str = 'hyperspherical'
    h: int = 32
    d_embed: int = 64
    hidden: typing.Tuple[int, ...] = (128,)
    final_activation: str = 'tanh'
    scale_mode: typing.Union[str, float] = 'frobenius'
    ngram_min: int = 2
    ngram_max: int = 4
    num_buckets: int = 4096
    lowercase: bool = True

    def __post_init__(self):
        if self.head not in HEAD_TYPES:
            raise errors.ConfigError(
                'model.head must be one of {0}, got {1}'.format(HEAD_TYPES, self.head)
            )
        if self.final_activation not in model.ACTIVATIONS:
            raise errors.ConfigError(
                'model.final_activation must be one of {0}'.format(model.ACTIVATIONS)
            )
        if self.h < 2 or self.d_embed < 1 or any(width < 1 for width in self.hidden):
            raise errors.ConfigError('model dimensions must be positive and h >= 2')

    def featurizer(self):
        return model.Featurizer(
            ngram_min=self.ngram_min,
            ngram_max=self.ngram_max,
            num_buckets=self.num_buckets,
            lowercase=self.lowercase,
        )


@dataclasses.dataclass(frozen=True)
class FrameConfig:
    # a frame csv to use instead of optimizing one
    path: typing.Optional[str] = None
    max_iters: int = 2000
    step_size: float = 0.1
    tolerance: float = 1e-10
    restarts: int = 5
    parallel: int = 1
    smoothing: float = 0.1

    def optimizer_config(self, seed):
        return sphere.FrameOptConfig(
            max_iters=self.max_iters,
            step_size=self.step_size,
            tolerance=self.tolerance,
            seed=seed,
            restarts=self.restarts,
            parallel=self.parallel,
            smoothing=self.smoothing,
        )


@dataclasses.dataclass(frozen=True)
class OptimConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.05
    weight_decay: float = 0.0
    u_theta_warm_epochs: int = 2

    # keep re-estimating u_theta every epoch instead of freezing it after warm-up
    u_theta_continuous: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise errors.ConfigError('optim.epochs must be >= 1')
        if self.batch_size < 1:
            raise errors.ConfigError('optim.batch_size must be >= 1')
        if self.learning_rate <= 0:
            raise errors.ConfigError('optim.learning_rate must be > 0')
        if self.weight_decay < 0:
            raise errors.ConfigError('optim.weight_decay must be >= 0')
        if self.u_theta_warm_epochs < 1:
            raise errors.ConfigError('optim.u_theta_warm_epochs must be >= 1')


@dataclasses.dataclass(frozen=True)
class EvalConfig:
    m_bins: int = 10
    eval_every: int = 1
    group_by: str = 'pred'
    fit_temperature: bool = False

    # number of least frequent train labels reported separately, 0 disables
    low_frequency_n: int = 0
    parallel: int = 1

    def __post_init__(self):
        if self.m_bins < 1:
            raise errors.ConfigError('evaluation.m_bins must be >= 1')
        if self.eval_every < 1:
            raise errors.ConfigError('evaluation.eval_every must be >= 1')
        if self.group_by not in ('pred', 'gold'):
            raise errors.ConfigError('evaluation.group_by must be pred or gold')
        if self.low_frequency_n < 0:
            raise errors.ConfigError('evaluation.low_frequency_n must be >= 0')
        if self.parallel < 1:
            raise errors.ConfigError('evaluation.parallel must be >= 1')


@dataclasses.dataclass(frozen=True)
class OutputConfig:
    checkpoint_path: typing.Optional[str] = None
    frame_path: typing.Optional[str] = None
    run_record_path: typing.Optional[str] = None

    # keep per-step batch indices and loss components in the run record
    log_steps: bool = False


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    data: DataConfig
    seed: int = 0
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    frame: FrameConfig = dataclasses.field(default_factory=FrameConfig)
    loss: losses.LossPlan = dataclasses.field(default_factory=losses.LossPlan)
    optim: OptimConfig = dataclasses.field(default_factory=OptimConfig)
    evaluation: EvalConfig = dataclasses.field(default_factory=EvalConfig)
    output: OutputConfig = dataclasses.field(default_factory=OutputConfig)

    def to_dict(self):
        document = dataclasses.asdict(self)
        document['version'] = CONFIG_VERSION
        return document


_SECTIONS = {
    'data': DataConfig,
    'model': ModelConfig,
    'frame': FrameConfig,
    'loss': losses.LossPlan,
    'optim': OptimConfig,
    'evaluation': EvalConfig,
    'output': OutputConfig,
}

_TUPLE_FIELDS = {('data', 'split'), ('model', 'hidden')}


def _build_section(name, cls, document):
    if not isinstance(document, dict):
        raise errors.ConfigError('Section {0} must be an object'.format(name))

    known = {field.name for field in dataclasses.fields(cls)}
    unknown = sorted(set(document) - known)
    if unknown:
        raise errors.ConfigError(
            'Unknown keys in section {0}: {1}'.format(
                name, ', '.join('{0}.{1}'.format(name, key) for key in unknown)
            )
        )

    values = dict(document)
    for key in values:
        if (name, key) in _TUPLE_FIELDS:
            values[key] = tuple(values[key])
    if name == 'data' and values.get('synth') is not None:
        values['synth'] = _build_section('data.synth', SynthConfig, values['synth'])

    try:
        return cls(**values)
    except TypeError as exc:
        raise errors.ConfigError('Invalid section {0}: {1}'.format(name, exc))


def default_seed(environ=None):
    environ = os.environ if environ is None else environ
    value = environ.get(SEED_ENV_VAR)
    if value is None:
        return 0
    try:
        return int(value)
    except ValueError:
        raise errors.ConfigError(
            '{0} must be an integer, got {1!r}'.format(SEED_ENV_VAR, value)
        )


def config_from_dict(document, environ=None):
    if not isinstance(document, dict):
        raise errors.ConfigError('Config must be a json object')

    document = dict(document)
    version = document.pop('version', None)
    if version != CONFIG_VERSION:
        raise errors.ConfigError(
            'Unsupported config version {0!r}, expected {1}'.format(version, CONFIG_VERSION)
        )

    unknown = sorted(set(document) - set(_SECTIONS) - {'seed'})
    if unknown:
        raise errors.ConfigError('Unknown config keys: {0}'.format(', '.join(unknown)))
    if 'data' not in document:
        raise errors.ConfigError('Config needs a data section')

    sections = {
        name: _build_section(name, cls, document[name])
        for name, cls in _SECTIONS.items()
        if name in document
    }

    seed = document.get('seed')
    if seed is None:
        seed = default_seed(environ)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise errors.ConfigError('seed must be a non-negative integer, got {0!r}'.format(seed))

    return TrainConfig(seed=seed, **sections)


def parse_override(override):
    """
    Splits 'dotted.key=<json value>' into (['dotted', 'key'], value). A value that is
    not valid json is taken as a plain string.
    """
    key, separator, raw_value = override.partition('=')
    if not separator or not key:
        raise errors.UsageError(
            'Override must look like section.key=value, got {0!r}'.format(override)
        )
    try:
        value = simplejson.loads(raw_value)
    except simplejson.JSONDecodeError:
        value = raw_value
    return key.strip().split('.'), value


def apply_overrides(document, overrides):
    document = copy.deepcopy(document)
    for override in overrides:
        path, value = parse_override(override)
        target = document
        for part in path[:-1]:
            child = target.setdefault(part, {})
            if not isinstance(child, dict):
                raise errors.ConfigError(
                    'Cannot override {0}: {1} is not a section'.format('.'.join(path), part)
                )
            target = child
        target[path[-1]] = value
    return document


def read_config_document(path):
    try:
        with open(path, 'r') as fh:
            return simplejson.load(fh)
    except OSError as exc:
        raise errors.StorageError('Failed to read config {0}: {1}'.format(path, exc))
    except simplejson.JSONDecodeError as exc:
        raise errors.ConfigError('Config {0} is not json: {1}'.format(path, exc))


def load_config(path=None, overrides=(), environ=None):
    """
    Reads the config file (or starts from an empty version 1 document) and applies
    the overrides in order, later ones winning
    """
    document = read_config_document(path) if path else {'version': CONFIG_VERSION}
    return config_from_dict(apply_overrides(document, overrides), environ=environ)


def write_config(cfg, path):
    try:
        with open(path, 'w') as fh:
            simplejson.dump(cfg.to_dict(), fh, indent=2)
    except OSError as exc:
        raise errors.StorageError('Failed to write config {0}: {1}'.format(path, exc))
