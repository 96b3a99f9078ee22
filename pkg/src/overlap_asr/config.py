"""Experiment configuration: nested dataclasses serialised as YAML."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field

import yaml

from .acoustic import MODEL_KINDS, AMConfig, AMTrainConfig
from .corpus import CorpusSpec, MixtureParams
from .diarization import DiarizerConfig, DiarizerTrainConfig
from .features import FeatureConfig, InputError


class ConfigError(InputError):
    pass


@dataclass
class AugmentConfig:
    overlap_range: tuple = (0.3, 0.7)
    ratio: float = 1.0  # augmented type-C examples per natural type-A segment
    speed_factors: tuple = (0.9, 1.1)
    min_silence: int = 10
    max_item_frames: int = 600


@dataclass
class DecodeConfig:
    chunk_seconds: float = 5.0
    lm_weight: float = 1.0
    insertion_penalty: float = 0.5
    lm_smoothing: float = 0.5
    min_segment_frames: int = 5
    silence_class: int = 0


@dataclass
class ScoringConfig:
    collar: float = 0.25
    min_gap: float = 0.5
    correlation: str = "pearson"


@dataclass
class DiarizerDataConfig:
    extra_mixtures: int = 200  # simulated mixtures on top of the training corpus
    single_speaker_fraction: float = 0.15
    mixture: MixtureParams = field(default_factory=MixtureParams)


@dataclass
class ExperimentConfig:
    seed: int = 0
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    eval_conversations: int = 10
    features: FeatureConfig = field(default_factory=FeatureConfig)
    diarizer: DiarizerConfig = field(default_factory=DiarizerConfig)
    diarizer_train: DiarizerTrainConfig = field(default_factory=DiarizerTrainConfig)
    diarizer_data: DiarizerDataConfig = field(default_factory=DiarizerDataConfig)
    # one long held-out conversation with many type-C segments for the embedding analysis
    analysis_mixture: MixtureParams = field(default_factory=lambda: MixtureParams(
        num_turns=40, mean_gap=1.0, overlap_prob=0.5, overlap_ratio=(0.1, 0.5), edge_silence=0.5))
    am: AMConfig = field(default_factory=AMConfig)
    am_kind: str = "icam"
    am_kinds: tuple = ("icam", "gfam", "blstm-mix")
    am_train: AMTrainConfig = field(default_factory=AMTrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    output_dir: str = "runs/default"

    def validate(self) -> "ExperimentConfig":
        for kind in (self.am_kind, *self.am_kinds):
            if kind not in MODEL_KINDS:
                raise ConfigError(f"unknown AM kind {kind!r}; choose from {MODEL_KINDS}")
        if self.corpus.num_conversations < 1:
            raise ConfigError("corpus.num_conversations must be at least 1")
        lo, hi = self.augment.overlap_range
        if not 0 < lo <= hi < 1:
            raise ConfigError("augment.overlap_range must lie inside (0, 1)")
        if self.am.num_senones != self.corpus.num_senones:
            raise ConfigError("am.num_senones must equal corpus.num_senones")
        if self.am.input_dim != self.features.num_ceps * (2 * self.features.context + 1):
            raise ConfigError("am.input_dim must equal num_ceps * (2 * context + 1)")
        return self


def _build(cls, data):
    """Recursively instantiate dataclass ``cls`` from plain dicts, rejecting unknown keys."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        hint = hints[f.name]
        if dataclasses.is_dataclass(hint):
            value = _build(hint, value)
        elif hint is tuple or typing.get_origin(hint) is tuple:
            value = tuple(value)
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data).validate()


def _plain(obj):
    if isinstance(obj, tuple):
        return [_plain(x) for x in obj]
    if isinstance(obj, list):
        return [_plain(x) for x in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


def config_to_dict(cfg) -> dict:
    return _plain(asdict(cfg))


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)


def config_hash(cfg) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
