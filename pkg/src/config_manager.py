"""
ConfigManager - Run configuration dataclasses, YAML loading and config hashing
"""
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import yaml

from errors import ConfigurationError

ID_SPACE_MODES = ('clustered', 'irregular')
VARIANTS = ('base', 'v1_content_feature', 'v2_mlp_map', 'v3_coarse',
            'v4_concat_fine', 'v5_structure_reuse')
VARIANT_ALIASES = {
    'base': 'base',
    'v1': 'v1_content_feature',
    'v2': 'v2_mlp_map',
    'v3': 'v3_coarse',
    'v4': 'v4_concat_fine',
    'v5': 'v5_structure_reuse',
}


def resolve_variant(name: str) -> str:
    """Accept either the short ('v5') or full ('v5_structure_reuse') variant name."""
    if name in VARIANTS:
        return name
    if name in VARIANT_ALIASES:
        return VARIANT_ALIASES[name]
    raise ConfigurationError('variant', f"unknown variant '{name}' (expected one of {', '.join(VARIANTS)})")


def _require(condition: bool, field_name: str, message: str):
    if not condition:
        raise ConfigurationError(field_name, message)


@dataclass
class GenConfig:
    """Synthetic corpus generation parameters."""

    n_users: int = 2000
    n_items: int = 1000
    n_topics: int = 10
    d_latent: int = 16
    vocab_size: int = 500
    tokens_per_item: int = 16
    n_interactions: int = 200000
    cold_fraction: float = 0.2
    history_len: int = 20
    id_space_mode: str = 'clustered'
    noise_sigma: float = 0.5
    seed: int = 0
    d_id: int = 32
    n_patches: int = 4
    d_patch: int = 8
    train_fraction: float = 0.8

    def validate(self) -> 'GenConfig':
        for name in ('n_users', 'n_items', 'n_topics', 'd_latent', 'vocab_size',
                     'tokens_per_item', 'n_interactions', 'history_len', 'd_id',
                     'n_patches', 'd_patch'):
            _require(int(getattr(self, name)) >= 1, name, 'must be >= 1')
        _require(0.0 < self.cold_fraction < 1.0, 'cold_fraction', 'must lie in (0, 1)')
        _require(0.0 < self.train_fraction < 1.0, 'train_fraction', 'must lie in (0, 1)')
        _require(self.noise_sigma >= 0.0, 'noise_sigma', 'must be >= 0')
        _require(self.id_space_mode in ID_SPACE_MODES, 'id_space_mode',
                 f"must be one of {ID_SPACE_MODES}")
        n_cold = self.n_cold_items
        _require(1 <= n_cold < self.n_items, 'cold_fraction',
                 f"gives {n_cold} cold items out of {self.n_items}")
        n_train = int(self.n_interactions * self.train_fraction)
        _require(n_train >= self.n_items - n_cold, 'n_interactions',
                 'too few training interactions to give every warm item one')
        _require(self.n_interactions - n_train >= 1, 'n_interactions',
                 'leaves no evaluation interactions')
        return self

    @property
    def n_cold_items(self) -> int:
        return int(round(self.cold_fraction * self.n_items))


@dataclass
class EncoderConfig:
    """Toy multimodal content encoder parameters."""

    n_layers: int = 8
    d_hidden: int = 64
    n_heads: int = 4
    vocab_size: int = 500
    max_tokens: int = 32
    d_id: int = 32
    d_ff: int = 128
    n_patches: int = 4
    d_patch: int = 8
    ln_eps: float = 1e-5
    seed: int = 0

    def validate(self) -> 'EncoderConfig':
        for name in ('n_layers', 'd_hidden', 'n_heads', 'vocab_size', 'max_tokens',
                     'd_id', 'd_ff', 'n_patches', 'd_patch'):
            _require(int(getattr(self, name)) >= 1, name, 'must be >= 1')
        _require(self.d_hidden % self.n_heads == 0, 'd_hidden', 'must be divisible by n_heads')
        _require(self.n_layers >= 3, 'n_layers', 'must be >= 3 (Stage 2 needs three layer groups)')
        _require(self.ln_eps > 0, 'ln_eps', 'must be > 0')
        return self


@dataclass
class Stage1Config:
    """Proxy alignment (coarse stage) training parameters."""

    tau: int = 5
    temperature: float = 0.07
    batch_size: int = 512
    lr: float = 1e-4
    epochs: int = 10
    weight_decay: float = 0.01
    seed: int = 0

    def validate(self) -> 'Stage1Config':
        _require(self.tau >= 0, 'tau', 'must be >= 0')
        _require(self.temperature > 0, 'temperature', 'must be > 0')
        _require(self.batch_size >= 2, 'batch_size', 'must be >= 2 (in-batch negatives)')
        _require(self.lr > 0, 'lr', 'must be > 0')
        _require(self.epochs >= 1, 'epochs', 'must be >= 1')
        _require(self.weight_decay >= 0, 'weight_decay', 'must be >= 0')
        return self


@dataclass
class Stage2Config:
    """Layer partitioning and adaptor parameters."""

    probe_size: int = 64
    n_groups: int = 3
    kmeans_max_iters: int = 100
    adaptor_hidden: int = 16
    d_fine: int = 0
    seed: int = 0

    def validate(self) -> 'Stage2Config':
        _require(self.probe_size >= 32, 'probe_size', 'must be >= 32')
        _require(self.n_groups == 3, 'n_groups', 'exactly three layer groups are supported')
        _require(self.kmeans_max_iters >= 1, 'kmeans_max_iters', 'must be >= 1')
        _require(self.adaptor_hidden >= 1, 'adaptor_hidden', 'must be >= 1')
        _require(self.d_fine >= 0, 'd_fine', 'must be >= 0 (0 means d)')
        return self


@dataclass
class RankerConfig:
    """CTR ranker parameters."""

    d: int = 32
    variant: str = 'base'
    hidden_sizes: Tuple[int, ...] = (256, 128)
    lr: float = 1e-3
    epochs: int = 4
    batch_size: int = 512
    weight_decay: float = 1e-5
    id_dropout: float = 0.2
    init_std: float = 0.05
    static_epochs: int = 200
    static_lr: float = 3e-3
    seed: int = 0

    def validate(self) -> 'RankerConfig':
        self.variant = resolve_variant(self.variant)
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        _require(self.d >= 1, 'd', 'must be >= 1')
        _require(len(self.hidden_sizes) == 2 and min(self.hidden_sizes) >= 1,
                 'hidden_sizes', 'must be two positive widths')
        _require(self.lr > 0, 'lr', 'must be > 0')
        _require(self.epochs >= 1, 'epochs', 'must be >= 1')
        _require(self.batch_size >= 1, 'batch_size', 'must be >= 1')
        _require(self.weight_decay >= 0, 'weight_decay', 'must be >= 0')
        _require(0.0 <= self.id_dropout < 1.0, 'id_dropout', 'must lie in [0, 1)')
        _require(self.init_std > 0, 'init_std', 'must be > 0')
        return self


@dataclass
class EvalConfig:
    """Experiment runner parameters."""

    variants: List[str] = field(default_factory=lambda: list(VARIANTS))
    seeds: int = 5
    n_days: int = 5
    workers: int = 1

    def validate(self) -> 'EvalConfig':
        self.variants = [resolve_variant(v) for v in self.variants]
        _require('base' in self.variants, 'variants', "must include 'base'")
        _require(self.seeds >= 1, 'seeds', 'must be >= 1')
        _require(self.n_days >= 1, 'n_days', 'must be >= 1')
        _require(self.workers >= 1, 'workers', 'must be >= 1')
        return self


SECTIONS = {
    'generation': GenConfig,
    'encoder': EncoderConfig,
    'stage1': Stage1Config,
    'stage2': Stage2Config,
    'ranker': RankerConfig,
    'eval': EvalConfig,
}


@dataclass
class RunConfig:
    """Declarative configuration of a full pipeline run."""

    generation: GenConfig = field(default_factory=GenConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    ranker: RankerConfig = field(default_factory=RankerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def validate(self) -> 'RunConfig':
        for name in SECTIONS:
            getattr(self, name).validate()
        # the encoder reads what the generator writes
        self.encoder.vocab_size = self.generation.vocab_size
        self.encoder.n_patches = self.generation.n_patches
        self.encoder.d_patch = self.generation.d_patch
        self.encoder.d_id = self.generation.d_id
        _require(self.ranker.d == self.generation.d_id, 'ranker.d',
                 'must equal generation.d_id (proxies live in the ID space)')
        return self

    def with_seed(self, seed: int) -> 'RunConfig':
        """Copy with every stage seed derived from one run seed."""
        clone = RunConfig.from_dict(self.to_dict())
        clone.seed = int(seed)
        clone.generation.seed = int(seed)
        clone.encoder.seed = int(seed) + 1
        clone.stage1.seed = int(seed) + 2
        clone.stage2.seed = int(seed) + 3
        clone.ranker.seed = int(seed) + 4
        return clone

    def to_dict(self) -> Dict[str, Any]:
        data = {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}
        data['ranker']['hidden_sizes'] = list(data['ranker']['hidden_sizes'])
        data['seed'] = self.seed
        return data

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> 'RunConfig':
        data = dict(data or {})
        kwargs = {}
        seed = data.pop('seed', 0)
        for key, value in data.items():
            if key not in SECTIONS:
                raise ConfigurationError(key, 'unknown config section')
            kwargs[key] = _build_section(key, SECTIONS[key], value or {})
        config = RunConfig(**kwargs)
        config.seed = int(seed)
        return config

    def config_hash(self) -> str:
        return config_hash(self.to_dict())


def _build_section(section: str, cls, values: Dict[str, Any]):
    known = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigurationError(f"{section}.{key}", 'unknown config key')
    values = dict(values)
    if cls is RankerConfig and 'hidden_sizes' in values:
        values['hidden_sizes'] = tuple(values['hidden_sizes'])
    return cls(**values)


def config_hash(data: Any) -> str:
    """sha256 of the canonical JSON rendering of a config object or dict."""
    if dataclasses.is_dataclass(data):
        data = dataclasses.asdict(data)
    canonical = json.dumps(data, sort_keys=True, separators=(',', ':'), default=list)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def load_run_config(path: Optional[str] = None, seed: Optional[int] = None) -> RunConfig:
    """
    Load and validate a run configuration.

    Args:
        path: YAML file; None gives the built-in defaults
        seed: Explicit seed (the --seed flag); overrides IDPROXY_SEED and the file

    Returns:
        Validated RunConfig with per-stage seeds derived from the run seed
    """
    data: Dict[str, Any] = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigurationError('config', f"file not found: {path}")
        with open(path, 'r', encoding='utf-8') as f:
            try:
                data = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigurationError('config', f"invalid YAML: {e}") from e
        if not isinstance(data, dict):
            raise ConfigurationError('config', 'top level must be a mapping')

    config = RunConfig.from_dict(data)
    run_seed = config.seed
    env_seed = os.getenv('IDPROXY_SEED')
    if env_seed is not None and env_seed.strip():
        try:
            run_seed = int(env_seed)
        except ValueError as e:
            raise ConfigurationError('IDPROXY_SEED', f"not an integer: {env_seed!r}") from e
    if seed is not None:
        run_seed = int(seed)
    return config.with_seed(run_seed).validate()
