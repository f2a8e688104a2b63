"""Run configuration: nested dataclasses loaded from / echoed to YAML.

Every default that has a published value uses it (d=256, 3 matchers, 8 heads,
beta=0.0625, lambda=(2, 5), window penalty 0.57, 128/256 patches). Keys may be
nested (``matcher: {depth: 2}``) or dotted (``matcher.depth: 2``).
"""
from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigurationError

DATA_ROOT_ENV = "MAPNET_DATA_ROOT"


@dataclass(frozen=True)
class ModelSection:
    d_model: int = 256
    n_heads: int = 8
    ffn_dim: int = 1024
    dropout: float = 0.1
    head_hidden: int = 256
    channel_reduction: int = 16
    spatial_kernel: int = 7
    normalization_mode: str = "post_norm"
    cls_gate: str = "channel"
    reg_gate: str = "spatial"
    shared_stack: bool = False
    alignment: bool = True
    template_size: int = 128
    search_size: int = 256

    def validate(self):
        _check(self.d_model >= 4 and self.d_model % 4 == 0, "model.d_model", "must be a positive multiple of 4")
        _check(self.n_heads >= 1 and self.d_model % self.n_heads == 0, "model.n_heads", "must divide model.d_model")
        _check(self.ffn_dim >= 1, "model.ffn_dim", "must be >= 1")
        _check(0.0 <= self.dropout < 1.0, "model.dropout", "must lie in [0, 1)")
        _check(self.head_hidden >= 1, "model.head_hidden", "must be >= 1")
        _check(self.channel_reduction >= 1 and self.d_model % self.channel_reduction == 0,
               "model.channel_reduction", "must divide model.d_model")
        _check(self.spatial_kernel >= 1 and self.spatial_kernel % 2 == 1, "model.spatial_kernel", "must be odd")
        _check(self.normalization_mode in ("literal", "post_norm"), "model.normalization_mode",
               "must be 'literal' or 'post_norm'")
        for key in ("cls_gate", "reg_gate"):
            _check(getattr(self, key) in ("channel", "spatial", "none"), f"model.{key}",
                   "must be 'channel', 'spatial' or 'none'")
        if self.shared_stack:
            _check(self.cls_gate == self.reg_gate, "model.shared_stack", "requires cls_gate == reg_gate")
        for key in ("template_size", "search_size"):
            v = getattr(self, key)
            _check(v >= 8 and v % 8 == 0, f"model.{key}", "must be a positive multiple of 8")
            _check(_is_square((v // 8) ** 2), f"model.{key}", "must give a square grid")


@dataclass(frozen=True)
class MatcherSection:
    depth: int = 3

    def validate(self):
        _check(self.depth >= 1, "matcher.depth", "must be >= 1")


@dataclass(frozen=True)
class BackboneSection:
    variant: str = "toy"
    stage_channels: tuple[int, ...] = (32, 64, 128)
    dilation_in_last_stage: bool = False
    pretrained: str = ""
    mean: tuple[float, ...] = (0.485, 0.456, 0.406)
    std: tuple[float, ...] = (0.229, 0.224, 0.225)

    def validate(self):
        _check(self.variant in ("toy", "resnet50_style"), "backbone.variant", "must be 'toy' or 'resnet50_style'")
        if self.variant == "toy":
            _check(len(self.stage_channels) == 3 and all(c >= 1 for c in self.stage_channels),
                   "backbone.stage_channels", "toy variant needs three positive widths")
        _check(len(self.mean) == 3, "backbone.mean", "needs three values")
        _check(len(self.std) == 3 and all(s > 0 for s in self.std), "backbone.std", "needs three positive values")


@dataclass(frozen=True)
class LossSection:
    beta: float = 0.0625
    lambda_giou: float = 2.0
    lambda_l1: float = 5.0
    cls_mode: str = "pg"
    reg_mode: str = "cg"

    def validate(self):
        for key in ("beta", "lambda_giou", "lambda_l1"):
            _check(getattr(self, key) > 0, f"loss.{key}", "must be positive")
        _check(self.cls_mode in ("pg", "ce"), "loss.cls_mode", "must be 'pg' or 'ce'")
        _check(self.reg_mode in ("cg", "plain"), "loss.reg_mode", "must be 'cg' or 'plain'")


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 30
    iterations_per_epoch: int = 100
    batch_size: int = 8
    optimizer: str = "adamw"
    lr_backbone: float = 1e-5
    lr_other: float = 1e-4
    weight_decay: float = 1e-4
    lr_drop_fraction: float = 2.0 / 3.0
    lr_drop_factor: float = 0.1
    grad_clip: float = 0.1
    seed: int = 0
    max_frame_gap: int = 100
    shift_jitter: float = 0.25
    scale_jitter: float = 0.25
    brightness_jitter: float = 0.1
    log_every: int = 10

    def validate(self):
        for key in ("epochs", "iterations_per_epoch", "batch_size", "max_frame_gap", "log_every"):
            _check(getattr(self, key) >= 1, f"train.{key}", "must be >= 1")
        _check(self.optimizer == "adamw", "train.optimizer", "only 'adamw' is supported")
        for key in ("lr_backbone", "lr_other", "weight_decay", "grad_clip", "shift_jitter", "scale_jitter",
                    "brightness_jitter"):
            _check(getattr(self, key) >= 0, f"train.{key}", "must be >= 0")
        _check(0 < self.lr_drop_fraction <= 1, "train.lr_drop_fraction", "must lie in (0, 1]")
        _check(0 < self.lr_drop_factor <= 1, "train.lr_drop_factor", "must lie in (0, 1]")

    @property
    def total_iterations(self) -> int:
        return self.epochs * self.iterations_per_epoch


@dataclass(frozen=True)
class TrackerSection:
    window_penalty: float = 0.57
    template_factor: float = 2.0
    search_factor: float = 4.0
    min_box_size: float = 2.0

    def validate(self):
        _check(0.0 <= self.window_penalty <= 1.0, "tracker.window_penalty", "must lie in [0, 1]")
        _check(self.template_factor > 0, "tracker.template_factor", "must be positive")
        _check(self.search_factor > 0, "tracker.search_factor", "must be positive")
        _check(self.min_box_size > 0, "tracker.min_box_size", "must be positive")


@dataclass(frozen=True)
class DataSection:
    root: str = ""
    sequences: int = 5
    length: int = 60
    frame_size: int = 256
    seed: int = 0

    def validate(self):
        for key in ("sequences", "length", "frame_size"):
            _check(getattr(self, key) >= 1, f"data.{key}", "must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    matcher: MatcherSection = field(default_factory=MatcherSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    tracker: TrackerSection = field(default_factory=TrackerSection)
    data: DataSection = field(default_factory=DataSection)

    def validate(self) -> "RunConfig":
        for f in dataclasses.fields(self):
            getattr(self, f.name).validate()
        return self

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def replace(self, **dotted) -> "RunConfig":
        """Return a copy with ``section__key=value`` or ``{"section.key": value}`` overrides."""
        merged = self.to_dict()
        for key, value in dotted.items():
            section, _, name = key.replace("__", ".").partition(".")
            merged.setdefault(section, {})[name] = value
        return from_dict(merged)

    @property
    def template_grid(self) -> int:
        return self.model.template_size // 8

    @property
    def search_grid(self) -> int:
        return self.model.search_size // 8

    def data_root(self) -> str:
        return self.data.root or os.environ.get(DATA_ROOT_ENV, "")


def _check(ok: bool, key: str, message: str):
    if not ok:
        raise ConfigurationError(f"{key}: {message}")


def _is_square(n: int) -> bool:
    r = int(n ** 0.5 + 0.5)
    return r * r == n


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(value: Any, typ, key: str):
    origin = typing.get_origin(typ)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{key}: expected a list, got {type(value).__name__}")
        inner = typing.get_args(typ)[0]
        return tuple(_coerce(v, inner, key) for v in value)
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{key}: expected a boolean, got {value!r}")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{key}: expected an integer, got {value!r}")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if typ is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigurationError(f"{key}: unsupported field type {typ}")


def _expand_dotted(raw: dict) -> dict:
    out: dict = {}
    for key, value in raw.items():
        if not isinstance(key, str):
            raise ConfigurationError(f"{key!r}: configuration keys must be strings")
        if "." in key:
            section, _, name = key.partition(".")
            out.setdefault(section, {})
            if not isinstance(out[section], dict):
                raise ConfigurationError(f"{section}: expected a mapping")
            out[section][name] = value
        else:
            if isinstance(value, dict) and isinstance(out.get(key), dict):
                out[key].update(value)
            else:
                out[key] = value
    return out


def from_dict(raw: dict | None) -> RunConfig:
    """Build and validate a :class:`RunConfig`; unknown keys are rejected."""
    raw = _expand_dotted(raw or {})
    sections = {f.name: f for f in dataclasses.fields(RunConfig)}
    built = {}
    for name, body in raw.items():
        if name not in sections:
            raise ConfigurationError(f"{name}: unknown configuration section")
        if body is None:
            body = {}
        if not isinstance(body, dict):
            raise ConfigurationError(f"{name}: expected a mapping")
        cls = sections[name].default_factory
        hints = typing.get_type_hints(cls)
        kwargs = {}
        for key, value in body.items():
            if key not in hints:
                raise ConfigurationError(f"{name}.{key}: unknown configuration key")
            kwargs[key] = _coerce(value, hints[key], f"{name}.{key}")
        built[name] = cls(**kwargs)
    return RunConfig(**built).validate()


def parse_config(path: str | os.PathLike | None) -> RunConfig:
    """Load a YAML config file; an empty or missing path yields all defaults."""
    if path is None:
        return RunConfig().validate()
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: not valid YAML ({exc})") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return from_dict(raw)


def echo_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def write_config(cfg: RunConfig, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(echo_config(cfg))
    return path
