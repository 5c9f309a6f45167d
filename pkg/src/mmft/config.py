"""Layered run configuration: defaults <- JSON file <- dotted overrides.

Dotted keys mirror the nested dataclass fields one-to-one
("encoder.d_model", "train.lr", "fusion.kind", ...), so shell scripts
can drive any experiment cell. Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .fusion import FUSION_KINDS
from .textpipe import ConfigurationError

STREAM_CHOICES = ("q", "v", "s", "single")


@dataclass
class EncoderSettings:
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 64
    max_seq_len: int = 48
    use_positional: bool = True
    aggregate_layer_offset: int = 0  # 0 = auto (4th-from-last when deep enough)
    dropout: float = 0.0
    embedding_layernorm: bool = True


@dataclass
class FusionSettings:
    kind: str = "mmft"
    n_layers: int = 1
    n_heads: int = 4
    d_ff: int = 64
    use_skip: bool = False
    type_embeddings: bool = False


@dataclass
class TrainSettings:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    warmup_steps: int = 300
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_fraction: float = 0.2
    early_stop_acc: float = 0.0  # 0 disables early stopping
    min_count: int = 1


@dataclass
class RunConfig:
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    fusion: FusionSettings = field(default_factory=FusionSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    streams: tuple = ("q", "v", "s")
    single_loss: bool = False
    loss_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    localized: bool = True
    seed: int = 0

    def validate(self) -> "RunConfig":
        if self.fusion.kind not in FUSION_KINDS:
            raise ConfigurationError(
                f"fusion.kind must be one of {FUSION_KINDS}, got {self.fusion.kind!r}")
        streams = tuple(self.streams)
        if streams == ("single",):
            pass
        elif not streams or any(s not in ("q", "v", "s") for s in streams):
            raise ConfigurationError(
                f"streams must be 'single' or a subset of q,v,s, got {streams}")
        elif len(set(streams)) != len(streams):
            raise ConfigurationError(f"duplicate streams: {streams}")
        if len(self.loss_weights) != 4:
            raise ConfigurationError("loss_weights needs exactly 4 entries")
        return self


_BOOL_STRINGS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _coerce(value, target):
    if isinstance(target, bool):
        if isinstance(value, bool):
            return value
        token = str(value).lower()
        if token not in _BOOL_STRINGS:
            raise ConfigurationError(f"cannot read {value!r} as a boolean")
        return _BOOL_STRINGS[token]
    if isinstance(target, int) and not isinstance(target, bool):
        return int(value)
    if isinstance(target, float):
        return float(value)
    if isinstance(target, tuple):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        items = tuple(value)
        if target and isinstance(target[0], float):
            return tuple(float(v) for v in items)
        return tuple(str(v) for v in items)
    return type(target)(value)


def flatten(config: RunConfig) -> dict:
    """RunConfig -> {"encoder.d_model": 32, ...} with tuples as lists."""
    out: dict = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if dataclasses.is_dataclass(value):
            for inner in dataclasses.fields(value):
                out[f"{f.name}.{inner.name}"] = getattr(value, inner.name)
        elif isinstance(value, tuple):
            out[f.name] = list(value)
        else:
            out[f.name] = value
    return out


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    for key, value in overrides.items():
        parts = key.split(".")
        target = config
        for part in parts[:-1]:
            if not hasattr(target, part) or not dataclasses.is_dataclass(getattr(target, part)):
                raise ConfigurationError(f"unknown config key {key!r}")
            target = getattr(target, part)
        leaf = parts[-1]
        if not hasattr(target, leaf) or dataclasses.is_dataclass(getattr(target, leaf)):
            raise ConfigurationError(f"unknown config key {key!r}")
        setattr(target, leaf, _coerce(value, getattr(target, leaf)))
    return config


def resolve(config_file: Path | str | None = None, overrides: dict | None = None) -> RunConfig:
    """Build the effective config: defaults, then file, then overrides."""
    config = RunConfig()
    if config_file is not None:
        with open(config_file) as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"config file {config_file} must hold a JSON object")
        apply_overrides(config, _flatten_json(loaded))
    if overrides:
        apply_overrides(config, overrides)
    return config.validate()


def _flatten_json(obj: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in obj.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten_json(value, dotted + "."))
        else:
            out[dotted] = value
    return out


def to_json_dict(config: RunConfig) -> dict:
    """Nested plain-dict snapshot for manifests and checkpoints."""
    out: dict = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if dataclasses.is_dataclass(value):
            out[f.name] = dataclasses.asdict(value)
        elif isinstance(value, tuple):
            out[f.name] = list(value)
        else:
            out[f.name] = value
    return out


def from_json_dict(obj: dict) -> RunConfig:
    config = RunConfig()
    apply_overrides(config, _flatten_json(obj))
    return config.validate()
