"""
Configuration Module
Run configuration as a tree of dataclasses, loaded from JSON or YAML,
validated before any training, and hashed for report traceability.
"""

import copy
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import yaml

from .datasets import KINDS, DatasetSpec
from .errors import ConfigError
from .feature_diversity import DEFAULT_ATTN_DIM, DEFAULT_TOKENS, FusionPlan, default_block_pairs
from .mutual_trainer import Hyperparams, InitMode, Method, TrainSchedule
from .posterior_geometry import DistanceMetric
from .variational_net import Architecture, PriorSpec, SamplingMode

logger = logging.getLogger(__name__)

PRESETS = {
    'small': {'temperature': 3.0, 'alpha': 1.0, 'beta': 2.0},
    'large': {'temperature': 1.0, 'alpha': 1.0, 'beta': 1.0},
}
UNCERTAINTY_KINDS = ('bald', 'entropy')
PRECISIONS = ('float64', 'float32')


@dataclass
class ArchitectureConfig:
    widths: List[int] = field(default_factory=lambda: [2, 64, 64, 2])
    # exclusive layer end index of each block; None puts one layer per block
    block_boundaries: Optional[List[int]] = None


@dataclass
class HyperConfig:
    # None takes the value of the scale preset
    temperature: Optional[float] = None
    alpha: Optional[float] = None
    beta: Optional[float] = None
    metric: str = 'w2'
    clip_norm: Optional[float] = None


@dataclass
class ScheduleConfig:
    stage1_epochs: int = 40
    stage2_epochs: int = 20
    lr: float = 1e-3
    stage1_decay_epochs: List[int] = field(default_factory=lambda: [16, 24, 32, 36])
    stage2_decay_epochs: List[int] = field(default_factory=lambda: [6, 12, 18])
    decay_factor: float = 10.0
    batch_size: int = 64


@dataclass
class AttentionConfig:
    attn_dim: int = DEFAULT_ATTN_DIM
    tokens: int = DEFAULT_TOKENS
    scale: bool = True
    # 1-based neighbouring block pairs; None uses the default for the block count
    pairs: Optional[List[List[int]]] = None


@dataclass
class DatasetConfig:
    kind: str = 'two_moons'
    n: int = 1000
    noise: float = 0.1
    classes: int = 3
    label_noise: float = 0.0
    path: Optional[str] = None
    labels_path: Optional[str] = None
    subset_size: int = 0
    validation_fraction: float = 0.2


@dataclass
class InitConfig:
    mode: str = 'pretrained_b2'
    pretrained_path: Optional[str] = None
    pretrain_epochs: int = 20


@dataclass
class MetricsConfig:
    samples: int = 50
    bins: int = 20
    retention: List[float] = field(default_factory=lambda: [0.2, 0.4, 0.6, 0.8])
    uncertainty: str = 'bald'
    history_samples: int = 5


@dataclass
class TrainConfig:
    """Fully resolved run configuration"""
    scale: str = 'small'
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    sampling: str = 'bbb'
    prior_std: float = 0.1
    hyper: HyperConfig = field(default_factory=HyperConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    init: InitConfig = field(default_factory=InitConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    methods: List[str] = field(default_factory=lambda: ['vanilla', 'dml', 'ours'])
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    precision: str = 'float64'
    output_dir: str = 'runs/default'

    # ----------------------------------------------------------- derived views
    def to_architecture(self) -> Architecture:
        widths = self.architecture.widths
        if self.architecture.block_boundaries is None:
            return Architecture.one_layer_per_block(widths)
        return Architecture(tuple(widths), tuple(self.architecture.block_boundaries))

    def to_hyperparams(self) -> Hyperparams:
        return Hyperparams(temperature=self.hyper.temperature, alpha=self.hyper.alpha, beta=self.hyper.beta,
                           metric=DistanceMetric(self.hyper.metric), clip_norm=self.hyper.clip_norm)

    def to_schedule(self) -> TrainSchedule:
        s = self.schedule
        return TrainSchedule(stage1_epochs=s.stage1_epochs, stage2_epochs=s.stage2_epochs, lr=s.lr,
                             stage1_decay_epochs=tuple(s.stage1_decay_epochs),
                             stage2_decay_epochs=tuple(s.stage2_decay_epochs),
                             decay_factor=s.decay_factor, batch_size=s.batch_size)

    def to_fusion_plan(self) -> FusionPlan:
        return FusionPlan(pairs=self.block_pairs(), tokens=self.attention.tokens,
                          attn_dim=self.attention.attn_dim, scale=self.attention.scale)

    def block_pairs(self) -> Tuple[Tuple[int, int], ...]:
        if self.attention.pairs is None:
            return tuple(default_block_pairs(self.to_architecture().num_blocks))
        return tuple((int(a), int(b)) for a, b in self.attention.pairs)

    def to_prior(self) -> PriorSpec:
        return PriorSpec(std=self.prior_std)

    def to_dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(**dataclasses.asdict(self.dataset))

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """First 12 hex chars of sha256 over the canonical JSON, output_dir excluded"""
        payload = self.to_dict()
        payload.pop('output_dir', None)
        canonical = json.dumps(payload, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:12]


_SECTIONS = {
    'architecture': ArchitectureConfig,
    'hyper': HyperConfig,
    'schedule': ScheduleConfig,
    'attention': AttentionConfig,
    'dataset': DatasetConfig,
    'init': InitConfig,
    'metrics': MetricsConfig,
}


def _build_section(cls, data: Any, prefix: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(prefix, f"expected a mapping, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{prefix}.{key}", "unknown key")
    return cls(**data)


def config_from_dict(data: Optional[Dict[str, Any]]) -> TrainConfig:
    """
    Build and validate a TrainConfig from parsed JSON / YAML

    Missing keys take their defaults; hyperparameters left unset take the
    values of the scale preset.

    Raises:
        ConfigError: unknown key or invalid value, naming the dotted key
    """
    data = copy.deepcopy(data or {})
    if not isinstance(data, dict):
        raise ConfigError('<root>', f"expected a mapping, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(key, "unknown key")
    for name, cls in _SECTIONS.items():
        data[name] = _build_section(cls, data.get(name), name)
    config = TrainConfig(**data)
    _apply_preset(config)
    validate(config)
    return config


def _apply_preset(config: TrainConfig) -> None:
    if config.scale not in PRESETS:
        raise ConfigError('scale', f"expected one of {sorted(PRESETS)}, got {config.scale!r}")
    for name, value in PRESETS[config.scale].items():
        if getattr(config.hyper, name) is None:
            setattr(config.hyper, name, value)


def _require(condition: bool, key: str, message: str) -> None:
    if not condition:
        raise ConfigError(key, message)


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def validate(config: TrainConfig) -> None:
    """Check every field; the first failure raises ConfigError naming its key"""
    arch = config.architecture
    _require(isinstance(arch.widths, list) and len(arch.widths) >= 2
             and all(_is_int(w) and w > 0 for w in arch.widths),
             'architecture.widths', f"need at least two positive integers, got {arch.widths}")
    if arch.block_boundaries is not None:
        try:
            Architecture(tuple(arch.widths), tuple(arch.block_boundaries))
        except (TypeError, ValueError) as exc:
            raise ConfigError('architecture.block_boundaries', str(exc))

    _require(config.sampling in [m.value for m in SamplingMode], 'sampling',
             f"expected bbb or radial, got {config.sampling!r}")
    _require(_is_number(config.prior_std) and config.prior_std > 0, 'prior_std',
             f"must be > 0, got {config.prior_std}")

    hyper = config.hyper
    _require(_is_number(hyper.temperature) and hyper.temperature > 0, 'hyper.temperature',
             f"must be > 0, got {hyper.temperature}")
    _require(_is_number(hyper.alpha) and hyper.alpha >= 0, 'hyper.alpha', f"must be >= 0, got {hyper.alpha}")
    _require(_is_number(hyper.beta) and hyper.beta >= 0, 'hyper.beta', f"must be >= 0, got {hyper.beta}")
    _require(hyper.metric in [m.value for m in DistanceMetric], 'hyper.metric',
             f"expected w2 or kl, got {hyper.metric!r}")
    _require(hyper.clip_norm is None or (_is_number(hyper.clip_norm) and hyper.clip_norm > 0),
             'hyper.clip_norm', f"must be > 0 when set, got {hyper.clip_norm}")

    s = config.schedule
    for key in ('stage1_epochs', 'stage2_epochs'):
        value = getattr(s, key)
        _require(_is_int(value) and value >= 0, f"schedule.{key}", f"must be an integer >= 0, got {value}")
    _require(_is_number(s.lr) and s.lr >= 0, 'schedule.lr', f"must be >= 0, got {s.lr}")
    for key in ('stage1_decay_epochs', 'stage2_decay_epochs'):
        value = getattr(s, key)
        _require(isinstance(value, list) and all(_is_int(e) and e >= 0 for e in value), f"schedule.{key}",
                 f"must be a list of non-negative integers, got {value}")
    _require(_is_number(s.decay_factor) and s.decay_factor > 0, 'schedule.decay_factor',
             f"must be > 0, got {s.decay_factor}")
    _require(_is_int(s.batch_size) and s.batch_size >= 2, 'schedule.batch_size',
             f"must be an integer >= 2, got {s.batch_size}")

    att = config.attention
    _require(_is_int(att.attn_dim) and att.attn_dim >= 1, 'attention.attn_dim', f"must be >= 1, got {att.attn_dim}")
    _require(_is_int(att.tokens) and att.tokens >= 1, 'attention.tokens', f"must be >= 1, got {att.tokens}")
    num_blocks = config.to_architecture().num_blocks
    if att.pairs is not None:
        _require(isinstance(att.pairs, list) and all(isinstance(p, list) and len(p) == 2 for p in att.pairs),
                 'attention.pairs', f"must be a list of [k, k+1] pairs, got {att.pairs}")
        for k, k_next in att.pairs:
            _require(_is_int(k) and k_next == k + 1 and 1 <= k and k_next <= num_blocks, 'attention.pairs',
                     f"[{k}, {k_next}] is not a neighbouring pair of {num_blocks} blocks")

    ds = config.dataset
    _require(ds.kind in KINDS, 'dataset.kind', f"expected one of {KINDS}, got {ds.kind!r}")
    _require(_is_int(ds.n) and ds.n >= 2, 'dataset.n', f"must be an integer >= 2, got {ds.n}")
    _require(_is_number(ds.noise) and ds.noise >= 0, 'dataset.noise', f"must be >= 0, got {ds.noise}")
    _require(_is_int(ds.classes) and ds.classes >= 2, 'dataset.classes', f"must be >= 2, got {ds.classes}")
    _require(_is_number(ds.label_noise) and 0 <= ds.label_noise <= 1, 'dataset.label_noise',
             f"must lie in [0, 1], got {ds.label_noise}")
    _require(_is_number(ds.validation_fraction) and 0 <= ds.validation_fraction < 1,
             'dataset.validation_fraction', f"must lie in [0, 1), got {ds.validation_fraction}")
    _require(_is_int(ds.subset_size) and ds.subset_size >= 0, 'dataset.subset_size',
             f"must be >= 0, got {ds.subset_size}")
    if ds.kind in ('csv_vectors', 'idx_images'):
        _require(bool(ds.path), 'dataset.path', f"required for {ds.kind}")

    _require(config.init.mode in [m.value for m in InitMode], 'init.mode',
             f"expected one of {[m.value for m in InitMode]}, got {config.init.mode!r}")
    _require(_is_int(config.init.pretrain_epochs) and config.init.pretrain_epochs >= 0, 'init.pretrain_epochs',
             f"must be >= 0, got {config.init.pretrain_epochs}")

    m = config.metrics
    _require(_is_int(m.samples) and m.samples >= 1, 'metrics.samples', f"must be >= 1, got {m.samples}")
    _require(_is_int(m.bins) and m.bins >= 1, 'metrics.bins', f"must be >= 1, got {m.bins}")
    _require(isinstance(m.retention, list) and all(_is_number(f) and 0 < f <= 1 for f in m.retention),
             'metrics.retention', f"fractions must lie in (0, 1], got {m.retention}")
    _require(m.uncertainty in UNCERTAINTY_KINDS, 'metrics.uncertainty',
             f"expected one of {UNCERTAINTY_KINDS}, got {m.uncertainty!r}")
    _require(_is_int(m.history_samples) and m.history_samples >= 0, 'metrics.history_samples',
             f"must be >= 0, got {m.history_samples}")

    valid_methods = [m.value for m in Method]
    _require(isinstance(config.methods, list) and config.methods
             and all(name in valid_methods for name in config.methods), 'methods',
             f"expected a non-empty subset of {valid_methods}, got {config.methods}")
    _require(isinstance(config.seeds, list) and config.seeds and all(_is_int(s) and s >= 0 for s in config.seeds),
             'seeds', f"expected a non-empty list of non-negative integers, got {config.seeds}")
    _require(config.precision in PRECISIONS, 'precision', f"expected one of {PRECISIONS}, got {config.precision!r}")
    _require(isinstance(config.output_dir, str) and config.output_dir != '', 'output_dir', "must be a non-empty path")


def load_config(path: Optional[str]) -> TrainConfig:
    """
    Read a JSON or YAML config file; None gives the defaults

    Raises:
        ConfigError: missing file, parse error or invalid value
    """
    if path is None:
        return config_from_dict({})
    if not os.path.exists(path):
        raise ConfigError('<file>', f"{path} does not exist")
    with open(path) as handle:
        text = handle.read()
    try:
        if path.endswith('.json'):
            data = json.loads(text) if text.strip() else {}
        else:
            data = yaml.safe_load(text) or {}
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError('<file>', f"cannot parse {path}: {exc}")
    config = config_from_dict(data)
    logger.info("loaded config %s (hash %s)", path, config.hash())
    return config


def apply_overrides(config: TrainConfig, seed: Optional[int] = None, out: Optional[str] = None,
                    samples: Optional[int] = None, metric: Optional[str] = None) -> TrainConfig:
    """Copy of ``config`` with command-line overrides applied and re-validated"""
    updated = copy.deepcopy(config)
    if seed is not None:
        updated.seeds = [seed]
    if out is not None:
        updated.output_dir = out
    if samples is not None:
        updated.metrics.samples = samples
    if metric is not None:
        updated.hyper.metric = metric
    validate(updated)
    return updated
