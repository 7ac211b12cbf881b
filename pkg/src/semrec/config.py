"""Run configuration: a typed tree with YAML loading and canonical hashing.

One structured file configures a whole run; command-line assignments override
individual dotted keys. The hash of the resolved tree (minus purely local
concerns like the output directory) content-addresses every pipeline stage
and is embedded in emitted reports for provenance.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from .corpus import SyntheticDomainSpec
from .errors import ConfigError
from .genrec import FinetuneConfig, RecTrainConfig
from .rqvae import QuantizerConfig

FINETUNE_MODES = ("none", "lora", "full")


@dataclass
class FileDomainConfig:
    """One real-data domain: a metadata file and an interaction file."""

    name: str
    metadata: str
    interactions: str


def _default_synthetic() -> tuple[SyntheticDomainSpec, ...]:
    return tuple(
        SyntheticDomainSpec(
            name=name,
            n_items=200,
            n_users=150,
            n_topics=10,
            pattern_strength=0.9,
            seq_len_min=5,
            seq_len_max=12,
            shared_topic_fraction=0.5,
        )
        for name in ("alpha", "beta", "gamma")
    )


@dataclass
class DatasetConfig:
    source: str = "synthetic"  # "synthetic" | "files"
    synthetic: tuple[SyntheticDomainSpec, ...] = field(default_factory=_default_synthetic)
    files: tuple[FileDomainConfig, ...] = ()
    k_core: int = 5
    max_seq_len: int = 12
    train_expansion: str = "all-prefixes"

    def __post_init__(self):
        if self.source not in ("synthetic", "files"):
            raise ConfigError(f"unknown dataset source {self.source!r}")
        specs = self.synthetic if self.source == "synthetic" else self.files
        if not specs:
            raise ConfigError(f"dataset source {self.source!r} has no domains configured")
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise ConfigError("domain names must be unique")
        if self.k_core < 1:
            raise ConfigError("k_core must be >= 1")
        if self.max_seq_len < 3:
            raise ConfigError("max_seq_len must be >= 3")

    @property
    def domain_names(self) -> list[str]:
        specs = self.synthetic if self.source == "synthetic" else self.files
        return [s.name for s in specs]


@dataclass
class EmbedderConfig:
    provider: str = "hash"  # "hash" | "remote"
    dim: int = 64
    standardize: bool = True
    cache: str = ""  # embedding cache file; empty disables caching
    provider_id: str = "remote"
    batch_limit: int = 64
    max_attempts: int = 4
    backoff_base: float = 0.5
    parallelism: int = 4
    timeout: float = 30.0

    def __post_init__(self):
        if self.provider not in ("hash", "remote"):
            raise ConfigError(f"unknown embedding provider {self.provider!r}")
        if self.dim < 1:
            raise ConfigError("embedding dim must be >= 1")


@dataclass
class IdentifierConfig:
    disamb_cap: int = 16

    def __post_init__(self):
        if self.disamb_cap < 1:
            raise ConfigError("disamb_cap must be >= 1")


@dataclass
class RecModelConfig:
    width: int = 48
    heads: int = 4
    layers: int = 2
    ffn_width: int = 96
    dropout: float = 0.1


@dataclass
class FinetuneSection:
    rank: int = 4
    alpha: float = 8.0
    epochs: int = 6
    batch_size: int = 128
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    patience: int = 2

    def to_runtime(self, mode: str, seed: int) -> FinetuneConfig:
        return FinetuneConfig(
            mode=mode,
            rank=self.rank,
            alpha=self.alpha,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            patience=self.patience,
            seed=seed,
        )


@dataclass
class DecodeConfig:
    beam_size: int = 20
    user_chunk: int = 64

    def __post_init__(self):
        if self.beam_size < 1 or self.user_chunk < 1:
            raise ConfigError("beam_size and user_chunk must be >= 1")


@dataclass
class EvalConfig:
    cutoffs: tuple[int, ...] = (5, 10)
    select_metric: str = "ndcg@10"
    purity_threshold: float = 0.95
    top_codes: int = 100
    analysis_levels: tuple[int, ...] = (0, 1)
    neighbor_ks: tuple[int, ...] = (10, 20)
    neighbor_metric: str = "euclidean"

    def __post_init__(self):
        self.cutoffs = tuple(self.cutoffs)
        self.analysis_levels = tuple(self.analysis_levels)
        self.neighbor_ks = tuple(self.neighbor_ks)
        if not self.cutoffs or min(self.cutoffs) < 1:
            raise ConfigError("cutoffs must be positive")


@dataclass
class AblationConfig:
    """The four switches spanning the variant grid."""

    shared_codebook: bool = True
    unified_recommender: bool = True
    dcl: bool = True
    finetune: str = "lora"

    def __post_init__(self):
        if self.finetune not in FINETUNE_MODES:
            raise ConfigError(
                f"finetune must be one of {FINETUNE_MODES}, got {self.finetune!r}"
            )


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/out"
    threads: int = 1
    workers: int = 1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    identifier: IdentifierConfig = field(default_factory=IdentifierConfig)
    model: RecModelConfig = field(default_factory=RecModelConfig)
    train: RecTrainConfig = field(default_factory=RecTrainConfig)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        if self.threads < 1 or self.workers < 1:
            raise ConfigError("threads and workers must be >= 1")
        if self.quantizer.input_dim != self.embedder.dim:
            raise ConfigError(
                f"quantizer input_dim {self.quantizer.input_dim} must equal "
                f"embedder dim {self.embedder.dim}"
            )
        # The ablation block is the single switch for the contrastive term
        # and the per-section seeds derive from the run seed.
        self.quantizer.dcl_enabled = self.ablation.dcl
        if self.quantizer.dcl_enabled and self.quantizer.batch_size < 2:
            raise ConfigError("quantizer batch_size must be >= 2 when dcl is on")
        self.quantizer.seed = self.seed
        self.train.seed = self.seed + 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def config_hash(config: RunConfig) -> str:
    """Canonical hash of everything that affects artifacts.

    The output directory and worker parallelism are excluded: they change
    where results live and how fast they appear, never what they contain.
    """
    data = config.to_dict()
    data.pop("out_dir")
    data.pop("workers")
    return hashlib.sha256(
        json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def canonical_hash(payload: Any) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


# ---------------------------------------------------------------------------
# Construction from plain mappings (YAML or overrides)


def _build_dataclass(cls: type, blob: Any, where: str) -> Any:
    if isinstance(blob, cls):
        return blob
    if not isinstance(blob, Mapping):
        raise ConfigError(f"{where} must be a mapping, got {type(blob).__name__}")
    hints = typing.get_type_hints(cls)
    valid = {f.name for f in fields(cls)}
    unknown = sorted(set(blob) - valid)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in blob:
            continue
        kwargs[f.name] = _coerce(hints[f.name], blob[f.name], f"{where}.{f.name}")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad {where}: {exc}") from exc


def _coerce(hint: Any, value: Any, where: str) -> Any:
    origin = typing.get_origin(hint)
    if dataclasses.is_dataclass(hint):
        return _build_dataclass(hint, value, where)
    if origin is tuple:
        args = typing.get_args(hint)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list")
        inner = args[0] if args else Any
        return tuple(_coerce(inner, v, f"{where}[{i}]") for i, v in enumerate(value))
    if origin in (typing.Union, types.UnionType):  # Optional[...] fields
        non_none = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _coerce(non_none[0], value, where) if non_none else value
    return value


def build_run_config(data: Mapping | None = None) -> RunConfig:
    return _build_dataclass(RunConfig, dict(data or {}), "config")


def load_config_file(path: str | Path) -> dict:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a mapping at top level")
    return data


def apply_overrides(data: dict, assignments: Sequence[str]) -> dict:
    """Apply `dotted.key=value` assignments; values parse as YAML scalars."""
    out = json.loads(json.dumps(data))  # deep copy of plain structures
    for assignment in assignments:
        if "=" not in assignment:
            raise ConfigError(f"override {assignment!r} is not of the form key=value")
        key, _, raw = assignment.partition("=")
        parts = key.strip().split(".")
        if not all(parts):
            raise ConfigError(f"override {assignment!r} has an empty key segment")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from exc
        node = out
        for part in parts[:-1]:
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {key!r} descends through a non-mapping")
            node = nxt
        node[parts[-1]] = value
    return out


# ---------------------------------------------------------------------------
# Ablation presets

ABLATION_PRESETS: dict[str, dict[str, Any]] = {
    "no_shared_codebook": {"ablation.shared_codebook": False},
    "no_unified_recommender": {"ablation.unified_recommender": False},
    "no_dcl": {"ablation.dcl": False},
    "no_finetune": {"ablation.finetune": "none"},
    "full_finetune": {"ablation.finetune": "full"},
}


def apply_preset(data: dict, preset: str) -> dict:
    if preset not in ABLATION_PRESETS:
        raise ConfigError(
            f"unknown ablation preset {preset!r}; choose from {sorted(ABLATION_PRESETS)}"
        )
    assignments = [f"{k}={json.dumps(v)}" for k, v in ABLATION_PRESETS[preset].items()]
    return apply_overrides(data, assignments)
