"""Run configuration: defaults, YAML file, then command-line overrides."""

from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .aligner import AlignerConfig
from .codec import CodecConfig
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .model import ModelConfig
from .sampler import SamplerPlan
from .training import TrainConfig

REPORT_DIR_ENV = "ARCHITTS_REPORT_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    report_dir: str = "reports"


@dataclass
class CorpusConfig:
    train_utterances: int = 2000
    test_utterances: int = 200
    length_range: tuple[int, int] = (6, 16)
    seed: int = 0

    def __post_init__(self):
        self.length_range = tuple(int(v) for v in self.length_range)


@dataclass
class EvalConfig:
    prompt_tokens: int = 3
    batch_size: int = 50
    ratios: list[float] = field(default_factory=lambda: [0.0, 0.5, 0.75])
    nfes: list[int] = field(default_factory=lambda: [16, 32])


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    codec: CodecConfig = field(default_factory=CodecConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerPlan = field(default_factory=SamplerPlan)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.model.vocab_size = self.codec.vocab_size
        self.model.latent_dim = self.codec.latent_dim
        self.model.speaker_dim = self.codec.speaker_dim
        self.model.__post_init__()

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# Desk-scale model; the class defaults above carry the full-size layer counts.
DESK_MODEL = {
    "aligner": {"model_dim": 96, "head_count": 4, "convnext_blocks": 2, "transformer_blocks": 3},
    "encoder": {"model_dim": 96, "head_count": 4, "blocks": 4},
    "decoder": {"model_dim": 96, "head_count": 4, "blocks": 2},
}
DESK_TRAIN = {"steps": 6000, "batch_size": 16, "peak_lr": 1e-3, "warmup_steps": 300, "log_every": 100}

_SCHEMA = {
    "paths": Paths,
    "codec": CodecConfig,
    "corpus": CorpusConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "sampler": SamplerPlan,
    "eval": EvalConfig,
}
_NESTED = {"model": {"aligner": AlignerConfig, "encoder": EncoderConfig, "decoder": DecoderConfig}}


def default_dict() -> dict:
    base = {name: _plain(asdict(cls())) for name, cls in _SCHEMA.items()}
    _merge(base, {"model": DESK_MODEL, "train": DESK_TRAIN})
    base["sampler"]["recompute"] = None
    # derived from the block count actually in effect
    base["model"]["encoder"]["ctc_tap_layer"] = None
    return base


def _check_keys(data: dict) -> None:
    for key, value in data.items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config section {key!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"section {key!r} must be a mapping")
        allowed = {f.name for f in fields(_SCHEMA[key])}
        for sub, subval in value.items():
            if sub not in allowed:
                raise ConfigError(f"unknown key {key}.{sub}")
            nested = _NESTED.get(key, {}).get(sub)
            if nested is not None:
                if not isinstance(subval, dict):
                    raise ConfigError(f"{key}.{sub} must be a mapping")
                inner = {f.name for f in fields(nested)}
                for k in subval:
                    if k not in inner:
                        raise ConfigError(f"unknown key {key}.{sub}.{k}")


def _merge(base: dict, update: dict) -> dict:
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = copy.deepcopy(value)
    return base


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def build(data: dict) -> RunConfig:
    _check_keys(data)
    try:
        model = dict(data["model"])
        for sub, cls in _NESTED["model"].items():
            model[sub] = cls(**model[sub])
        return RunConfig(
            paths=Paths(**data["paths"]),
            codec=CodecConfig(**data["codec"]),
            corpus=CorpusConfig(**data["corpus"]),
            model=ModelConfig(**model),
            train=TrainConfig(**data["train"]),
            sampler=SamplerPlan(**data["sampler"]),
            eval=EvalConfig(**data["eval"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(
    path: str | Path | None = None,
    overrides: dict | None = None,
    dotted: list[str] | None = None,
    env: dict | None = None,
) -> RunConfig:
    """Defaults, then the YAML file, then environment, then explicit overrides."""
    data = default_dict()
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _check_keys(loaded)
        _merge(data, loaded)
    env = os.environ if env is None else env
    if env.get(REPORT_DIR_ENV):
        data["paths"]["report_dir"] = env[REPORT_DIR_ENV]
    for text in dotted or []:
        keys, value = parse_override(text)
        _set(data, keys, value)
    if overrides:
        for key, value in overrides.items():
            if value is not None:
                _set(data, key.split("."), value)
    return build(data)


def _set(data: dict, keys: list[str], value) -> None:
    node = data
    for k in keys[:-1]:
        if k not in node or not isinstance(node[k], dict):
            raise ConfigError(f"unknown key {'.'.join(keys)}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown key {'.'.join(keys)}")
    node[keys[-1]] = value
