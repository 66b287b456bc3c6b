"""
Flat ``key=value`` configuration.

Dotted keys (``loss.delta``, ``encoder.channels``, ``model.msdf``) address nested
sections. Values are validated by marshmallow schemas and turned into frozen
dataclasses. Precedence, lowest first: defaults, ``preset``, config file, overrides.
"""

import dataclasses
import enum
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import marshmallow as m
from marshmallow import fields, validate

from .constants import DEFAULT_THRESHOLD, DEFAULT_TILE_SIZE
from .data import SynthesisConfig, check_divisible
from .encoder import EncoderBackend, EncoderSpec
from .exceptions import ConfigError
from .losses import LossConfig
from .network import ModelConfig
from .typedefs import LOSS_KINDS, SPLITS, ScheduleUnit

logger = logging.getLogger(__name__)

# Learning-rate settings per public dataset
PRESETS: dict[str, dict[str, str]] = {
    "levir": {"base_lr": "0.01", "decay_exponent": "2.0"},
    "clcd": {"base_lr": "0.01", "decay_exponent": "2.0"},
    "whu": {"base_lr": "0.001", "decay_exponent": "3.0"},
    "s2looking": {"base_lr": "0.001", "decay_exponent": "3.0"},
}

# Short names accepted by ablation sweeps
KEY_ALIASES = {
    "delta": "loss.delta",
    "loss": "loss.kind",
    "fusion": "model.fusion",
    "msdf": "model.msdf",
    "lr": "base_lr",
}


@dataclass(frozen=True, slots=True, kw_only=True)
class TrainConfig:
    epochs: int = 35
    base_lr: float = 0.01
    decay_exponent: float = 2.0
    schedule_horizon: float = 50.0
    schedule_unit: ScheduleUnit = "epoch"
    momentum: float = 0.9
    batch_size: int = 4
    seed: int = 0
    crop_size: int = DEFAULT_TILE_SIZE
    max_iterations: int | None = None
    num_workers: int = 0
    threshold: float = DEFAULT_THRESHOLD
    val_tta: bool = False
    preset: str | None = None
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self) -> None:
        if self.base_lr <= 0:
            raise ConfigError(f"`base_lr` must be positive, got {self.base_lr}")
        if self.epochs < 1:
            raise ConfigError(f"`epochs` must be >= 1, got {self.epochs}")
        if self.decay_exponent < 0:
            raise ConfigError(f"`decay_exponent` must be >= 0, got {self.decay_exponent}")
        if self.schedule_horizon <= 0:
            raise ConfigError(f"`schedule_horizon` must be positive, got {self.schedule_horizon}")
        if self.batch_size < 1:
            raise ConfigError(f"`batch_size` must be >= 1, got {self.batch_size}")
        check_divisible(self.crop_size, "crop_size")


class IntTuple(fields.Field):
    """Comma separated integers, e.g. ``32,64,128,256``."""

    def _deserialize(self, value: Any, attr: str | None, data: Mapping[str, Any] | None, **kwargs: Any) -> Any:
        items = value.split(",") if isinstance(value, str) else value
        try:
            return tuple(int(item) for item in items)
        except (TypeError, ValueError) as e:
            raise m.ValidationError("Expected comma separated integers.") from e

    def _serialize(self, value: Any, attr: str | None, obj: Any, **kwargs: Any) -> Any:
        return None if value is None else ",".join(str(v) for v in value)


class LossSchema(m.Schema):
    kind = fields.Str(validate=validate.OneOf(LOSS_KINDS))
    delta = fields.Float(validate=validate.Range(min=0.0, max=1.0, max_inclusive=False))
    epsilon = fields.Float(validate=validate.Range(min=0.0, min_inclusive=False))
    alpha = fields.Float(validate=validate.Range(min=0.0, max=1.0, min_inclusive=False, max_inclusive=False))
    gamma = fields.Float(validate=validate.Range(min=0.0))
    w0 = fields.Float(validate=validate.Range(min=0.0))
    w1 = fields.Float(validate=validate.Range(min=0.0))
    bce_weight = fields.Float(validate=validate.Range(min=0.0))
    dice_weight = fields.Float(validate=validate.Range(min=0.0))

    @m.post_load
    def make_config(self, data: dict[str, Any], **kwargs: Any) -> LossConfig:
        return LossConfig(**data)


class EncoderSchema(m.Schema):
    backend = fields.Str(validate=validate.OneOf([b.value for b in EncoderBackend]))
    channels = IntTuple()
    weights = fields.Str(allow_none=True)
    freeze = fields.Bool()

    @m.post_load
    def make_spec(self, data: dict[str, Any], **kwargs: Any) -> EncoderSpec:
        if "backend" in data:
            data["backend"] = EncoderBackend(data["backend"])
        if data.get("weights"):
            data["weights"] = Path(data["weights"])
        return EncoderSpec(**data)


class ModelSchema(m.Schema):
    head_width = fields.Int(validate=validate.Range(min=1))
    residual_blocks = fields.Int(validate=validate.Range(min=0))
    fusion = fields.Str(validate=validate.OneOf(["stfe", "diff"]))
    msdf = fields.Bool()


class TrainConfigSchema(m.Schema):
    epochs = fields.Int(validate=validate.Range(min=1))
    base_lr = fields.Float(validate=validate.Range(min=0.0, min_inclusive=False))
    decay_exponent = fields.Float(validate=validate.Range(min=0.0))
    schedule_horizon = fields.Float(validate=validate.Range(min=0.0, min_inclusive=False))
    schedule_unit = fields.Str(validate=validate.OneOf(["epoch", "iteration"]))
    momentum = fields.Float(validate=validate.Range(min=0.0, max=1.0))
    batch_size = fields.Int(validate=validate.Range(min=1))
    seed = fields.Int(validate=validate.Range(min=0))
    crop_size = fields.Int(validate=validate.Range(min=1))
    max_iterations = fields.Int(allow_none=True, validate=validate.Range(min=1))
    num_workers = fields.Int(validate=validate.Range(min=0))
    threshold = fields.Float(validate=validate.Range(min=0.0, max=1.0))
    val_tta = fields.Bool()
    preset = fields.Str(allow_none=True, validate=validate.OneOf(list(PRESETS)))
    loss = fields.Nested(LossSchema)
    encoder = fields.Nested(EncoderSchema)
    model = fields.Nested(ModelSchema)

    @m.post_load
    def make_config(self, data: dict[str, Any], **kwargs: Any) -> TrainConfig:
        encoder = data.pop("encoder", None) or EncoderSpec()
        model_fields = data.pop("model", {})
        data["model"] = ModelConfig(encoder=encoder, **model_fields)
        return TrainConfig(**data)


def parse_flat_config(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    values: dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"Line {number}: expected key=value, got {raw!r}")
        values[key.strip()] = value.strip()
    return values


def read_config_file(path: str | Path) -> dict[str, str]:
    try:
        return parse_flat_config(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e


def _nest(flat: Mapping[str, Any]) -> dict[str, Any]:
    nested: dict[str, Any] = {}
    for key, value in flat.items():
        key = KEY_ALIASES.get(key, key)
        section, dot, name = key.partition(".")
        if dot:
            nested.setdefault(section, {})[name] = value
        else:
            nested[key] = value
    return nested


def build_config(*layers: Mapping[str, Any] | None) -> TrainConfig:
    """Merge flat layers (later ones win), apply the preset underneath them, validate."""
    merged: dict[str, Any] = {}
    for layer in layers:
        if layer:
            merged.update({KEY_ALIASES.get(k, k): v for k, v in layer.items() if v is not None})

    preset = merged.get("preset")
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"Unknown preset {preset!r}, expected one of {sorted(PRESETS)}")
        merged = {**PRESETS[preset], **merged}

    try:
        config: TrainConfig = TrainConfigSchema().load(_nest(merged))
    except m.ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e.messages}") from e
    except TypeError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e
    logger.debug("Resolved configuration: %s", config)
    return config


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> TrainConfig:
    file_values = read_config_file(path) if path is not None else None
    return build_config(file_values, overrides)


def _flat_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def to_flat(config: TrainConfig) -> dict[str, str]:
    """Inverse of :func:`build_config`: every setting as a flat string mapping."""
    flat: dict[str, str] = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if f.name == "loss":
            flat.update({f"loss.{k.name}": _flat_value(getattr(value, k.name)) for k in dataclasses.fields(value)})
        elif f.name == "model":
            for k in dataclasses.fields(value):
                inner = getattr(value, k.name)
                if k.name == "encoder":
                    flat.update(
                        {
                            f"encoder.{e.name}": _flat_value(getattr(inner, e.name))
                            for e in dataclasses.fields(inner)
                            if getattr(inner, e.name) is not None
                        }
                    )
                else:
                    flat[f"model.{k.name}"] = _flat_value(inner)
        elif value is not None:
            flat[f.name] = _flat_value(value)
    return flat


def format_config(config: TrainConfig) -> str:
    return "".join(f"{key}={value}\n" for key, value in sorted(to_flat(config).items()))


class SynthesisSchema(m.Schema):
    num_samples = fields.Int(required=True, validate=validate.Range(min=1))
    tile_size = fields.Int(validate=validate.Range(min=1))
    change_fraction_target = fields.Float(validate=validate.Range(min=0.0, max=1.0, min_inclusive=False))
    object_count_range = IntTuple(validate=validate.Length(equal=2))
    changed_count_range = IntTuple(validate=validate.Length(equal=2))
    object_size_range = IntTuple(validate=validate.Length(equal=2))
    noise_level = fields.Float(validate=validate.Range(min=0.0))
    seed = fields.Int(validate=validate.Range(min=0))
    tolerance = fields.Float(validate=validate.Range(min=0.0, min_inclusive=False))
    max_retries = fields.Int(validate=validate.Range(min=1))
    split_fractions = fields.Dict(
        keys=fields.Str(validate=validate.OneOf(SPLITS)),
        values=fields.Float(validate=validate.Range(min=0.0, max=1.0)),
    )

    @m.post_load
    def make_config(self, data: dict[str, Any], **kwargs: Any) -> SynthesisConfig:
        return SynthesisConfig(**data)


def build_synthesis_config(values: Mapping[str, Any]) -> SynthesisConfig:
    """Validate synthesis settings; ``None`` values fall back to the defaults."""
    try:
        config: SynthesisConfig = SynthesisSchema().load({k: v for k, v in values.items() if v is not None})
    except m.ValidationError as e:
        raise ConfigError(f"Invalid synthesis settings: {e.messages}") from e
    return config
