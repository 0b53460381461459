"""Configuration dataclasses and the dotted-key override machinery.

Every config is a plain dataclass. ``from_dict`` rejects unknown keys so a
typo in a config file or ``--set`` override fails loudly instead of being
silently ignored.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration."""


FREEZE_MODES = ("frozen", "head", "all")
DECODER_MODES = ("full", "lora", "frozen")


@dataclass
class EncoderConfig:
    layers: int = 2
    heads: int = 4
    model_dim: int = 64
    mlp_dim: int = 128
    patch_embed_size: int = 8
    frozen: bool = False

    def validate(self, name: str = "encoder") -> None:
        if self.layers < 1 or self.heads < 1:
            raise ConfigError(f"{name}: layers and heads must be >= 1")
        if self.model_dim % self.heads:
            raise ConfigError(
                f"{name}.model_dim={self.model_dim} not divisible by heads={self.heads}"
            )
        if self.patch_embed_size < 1:
            raise ConfigError(f"{name}.patch_embed_size must be positive")


@dataclass
class MediaConfig:
    key_frames: int = 2
    high_size: tuple[int, int] = (16, 16)
    box: tuple[int, int] = (96, 160)
    patch: int = 32
    num_patches: int = 8

    def validate(self) -> None:
        if self.key_frames < 1:
            raise ConfigError("media.key_frames must be >= 1")
        if min(self.high_size) < 1 or min(self.box) < 1:
            raise ConfigError("media sizes must be positive")
        if self.patch > min(self.box):
            raise ConfigError("media.patch must fit inside media.box")
        if self.num_patches < 1:
            raise ConfigError("media.num_patches must be >= 1")


@dataclass
class ModelConfig:
    d_model: int = 64
    decoder_layers: int = 2
    decoder_heads: int = 4
    decoder_mlp_dim: int = 256
    vocab_size: int = 259
    context: int = 640
    head_hidden: int = 0  # 0 -> d_model
    head_bias_init: float = 3.0
    lora_rank: int = 4
    high: EncoderConfig = field(default_factory=EncoderConfig)
    low: EncoderConfig = field(default_factory=EncoderConfig)
    media: MediaConfig = field(default_factory=MediaConfig)

    def validate(self) -> None:
        if self.d_model % self.decoder_heads:
            raise ConfigError("d_model must be divisible by decoder_heads")
        if self.lora_rank < 1:
            raise ConfigError("lora_rank must be >= 1")
        if self.lora_rank > self.d_model:
            raise ConfigError(
                f"lora_rank={self.lora_rank} exceeds projection size {self.d_model}"
            )
        self.high.validate("high")
        if self.high.frozen:
            raise ConfigError("high.frozen is not used; set train.encoder_freeze_mode instead")
        self.low.validate("low")
        self.media.validate()
        for axis in self.media.high_size:
            if axis % self.high.patch_embed_size:
                raise ConfigError(
                    f"media.high_size {self.media.high_size} not divisible by "
                    f"high.patch_embed_size={self.high.patch_embed_size}"
                )
        if self.media.patch % self.low.patch_embed_size:
            raise ConfigError(
                f"media.patch={self.media.patch} not divisible by "
                f"low.patch_embed_size={self.low.patch_embed_size}"
            )

    @property
    def high_tokens(self) -> int:
        h, w = self.media.high_size
        p = self.high.patch_embed_size
        return (h // p) * (w // p)

    @property
    def low_tokens(self) -> int:
        return (self.media.patch // self.low.patch_embed_size) ** 2


@dataclass
class TrainingConfig:
    batch_size: int = 16
    learning_rate: float = 1e-3
    steps: int = 300
    epochs: int = 0  # >0 overrides steps: epochs * ceil(train_sources / batch)
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    single_pair_mix: float = 0.5
    rank_margin: float = 1.0
    encoder_freeze_mode: str = "frozen"
    decoder_mode: str = "full"
    seed: int = 0
    eval_every: int = 0
    log_every: int = 10

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if any(w < 0 for w in self.loss_weights) or len(self.loss_weights) != 3:
            raise ConfigError("loss_weights must be three non-negative numbers")
        if not 0.0 <= self.single_pair_mix <= 1.0:
            raise ConfigError("single_pair_mix must lie in [0, 1]")
        if self.encoder_freeze_mode not in FREEZE_MODES:
            raise ConfigError(f"encoder_freeze_mode must be one of {FREEZE_MODES}")
        if self.decoder_mode not in DECODER_MODES:
            raise ConfigError(f"decoder_mode must be one of {DECODER_MODES}")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")


@dataclass
class DataConfig:
    sources: int = 10
    levels: int = 20
    kinds: tuple[str, ...] = ("GAUSS_BLUR",)
    height: int = 90
    width: int = 160
    frames: int = 3
    test_sources: int = 2
    seed: int = 0
    encoder_cmd: str = ""


@dataclass
class EvalConfig:
    diffs: tuple[int, ...] = (2, 4, 6, 8, 10, 20)
    ties_as_flips: bool = True
    logistic: bool = False
    plots: bool = False
    min_srcc: float | None = None
    max_fr: float | None = None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainingConfig = field(default_factory=TrainingConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()


def to_dict(cfg: Any) -> dict:
    """Convert a (nested) config dataclass to plain JSON-friendly types."""
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            value = to_dict(value)
        elif isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


def _coerce(tp: Any, value: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return from_dict(tp, value, path)
    if origin is tuple:
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        if args and args[-1] is Ellipsis:
            return tuple(_coerce(args[0], v, path) for v in value)
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(a, v, path) for a, v in zip(args, value))
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        if value is None or (isinstance(value, str) and value.lower() in ("none", "null")):
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if tp is bool:
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{path}: cannot parse boolean from {value!r}")
        return bool(value)
    if tp in (int, float, str):
        try:
            return tp(value.strip() if isinstance(value, str) else value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return value


def from_dict(cls: type, data: dict, path: str = "") -> Any:
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        where = path or cls.__name__
        raise ConfigError(f"unknown config key(s) in {where}: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _coerce(hints[key], value, f"{path}.{key}" if path else key)
    return cls(**kwargs)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` overrides and return a new config."""
    data = to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config key: {key}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key: {key}")
        node[parts[-1]] = value
    return from_dict(RunConfig, data)


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        text = Path(path).read_text(encoding="utf-8")
        raw = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
        cfg = from_dict(RunConfig, raw or {})
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg
