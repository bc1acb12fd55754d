"""Run configuration: a TOML file of dotted keys plus command-line overrides.

Example::

    flow.window_size = 15
    model.variant = "sa_bi_cnn_lstm"
    train.max_epochs = 100
    data.frame_height = 240
    paths.manifest = "data/manifest.txt"

Every key has a default (the dataclass field defaults below); unknown keys
are rejected. Overrides given as ``section.key=value`` are parsed as TOML
values, falling back to a bare string. The model input shape follows
``data.frame_height`` and ``data.frame_width`` unless set explicitly, in which
case the two must agree.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .network import ModelConfig
from .optical_flow import FlowParams
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    frame_height: int = 240
    frame_width: int = 320
    split_policy: str = "manifest"
    val_fraction: float = 0.2
    test_fraction: float = 0.0
    augment: tuple[str, ...] = ("horizontal_flip", "scale")


@dataclass(frozen=True)
class PathsConfig:
    manifest: str = "manifest.txt"
    flow_cache: str = "flow_cache"
    weights: str = "runs/weights.cynw"
    output_dir: str = "runs"
    flow_colors: str = ""  # directory for colorized flow images; empty disables them


@dataclass(frozen=True)
class RunConfig:
    flow: FlowParams = field(default_factory=FlowParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @property
    def frame_size(self) -> tuple[int, int]:
        return (self.data.frame_height, self.data.frame_width)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            section = asdict(getattr(self, f.name))
            out[f.name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    def dump(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(tomli_w.dumps(self.to_dict()).encode())
        return path


_SECTIONS = {f.name: f.default_factory for f in fields(RunConfig)}


def _flatten(tree: Mapping, prefix: str = "") -> dict[str, Any]:
    flat = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(_flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def parse_override(text: str) -> tuple[str, Any]:
    key, sep, raw = text.partition("=")
    if not sep:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key = key.strip()
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key, value


def _coerce(template: Any, value: Any, key: str) -> Any:
    if isinstance(template, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(template, int) and not isinstance(template, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(template, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(template, tuple):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(template, str):
        return str(value)
    return value


def resolve(config_path: Optional[Path] = None, overrides: Sequence[str] = (),
            seed: Optional[int] = None) -> RunConfig:
    """Defaults, then the config file, then ``overrides``; ``seed`` sets every seed."""
    values: dict[str, Any] = {}
    if config_path is not None:
        try:
            values.update(_flatten(tomllib.loads(Path(config_path).read_text())))
        except FileNotFoundError:
            raise ConfigError(f"config file {config_path} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{config_path}: {exc}") from None
    for text in overrides:
        key, value = parse_override(text)
        values[key] = value
    if seed is not None:
        values["model.seed"] = seed
        values["train.seed"] = seed

    sections: dict[str, dict[str, Any]] = {name: {} for name in _SECTIONS}
    for key, value in values.items():
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        defaults = asdict(_SECTIONS[section]())
        if name not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        sections[section][name] = _coerce(defaults[name], value, key)
    try:
        built = {name: _SECTIONS[name]().__class__(**{**asdict(_SECTIONS[name]()), **sections[name]})
                 for name in _SECTIONS}
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    data, model = built["data"], built["model"]
    frame_shape = (data.frame_height, data.frame_width, 3)
    if "input_shape" not in sections["model"]:
        built["model"] = model.with_(input_shape=frame_shape)
    elif tuple(model.input_shape) != frame_shape:
        raise ConfigError(f"model.input_shape {tuple(model.input_shape)} disagrees with the "
                          f"data frame size {frame_shape}")
    return RunConfig(**built)
