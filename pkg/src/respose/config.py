"""Strict JSON run configuration.

A run config is a nested JSON object whose sections mirror the module
configs. Parsing fills defaults, rejects unknown keys naming the exact dotted
path, checks constraints, and produces a canonical form: parse, serialize,
parse is the identity.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field

from . import arrayio
from .backbone import BackboneConfig
from .errors import ConfigError
from .losses import LossConfig
from .temporal import TemporalConfig
from .texture import TextureConfig
from .training import AugmentConfig, TrainConfig, validate_stages


@dataclass(frozen=True)
class DatasetSection:
    count: int = 2000
    seed: int = 0
    fraction3d: float = 0.3
    canonical_size: int = 224
    focal: float = 1000.0
    body_seed: int = 0
    num_vertices: int = 128
    num_joints: int = 8


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    temporal: TemporalConfig = field(default_factory=TemporalConfig)
    texture: TextureConfig = field(default_factory=TextureConfig)


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _coerce(value, hint, path: str):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = typing.get_args(hint)
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(f"{path}: null is not allowed")
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        args = typing.get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if dataclasses.is_dataclass(hint):
        return _parse_section(hint, value, path)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {type(value).__name__}")
        return value
    if hint is int:
        # JSON true/false are Python bools, which are ints; keep them out
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {type(value).__name__}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {type(value).__name__}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {type(value).__name__}")
        return value
    raise ConfigError(f"{path}: unsupported config type {hint!r}")


def _parse_section(cls, raw, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            raise ConfigError(f"unknown config key: {_join(path, str(key))}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in raw:
            kwargs[f.name] = _coerce(raw[f.name], hints[f.name], _join(path, f.name))
    return cls(**kwargs)


def _require(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{path}: {msg}")


def _check(cfg: RunConfig) -> None:
    d, b, l, t = cfg.dataset, cfg.backbone, cfg.loss, cfg.train
    _require(d.count >= 1, "dataset.count", "must be >= 1")
    _require(0.0 <= d.fraction3d <= 1.0, "dataset.fraction3d", "must be in [0, 1]")
    _require(d.canonical_size >= 24, "dataset.canonical_size", "must be >= 24")
    _require(d.focal > 0, "dataset.focal", "must be > 0")
    _require(d.num_vertices >= d.num_joints >= 2, "dataset.num_joints", "need num_vertices >= num_joints >= 2")
    _require(len(b.widths) >= 1 and all(w >= 1 for w in b.widths), "backbone.widths", "must be positive")
    _require(b.blocks_per_stage >= 1, "backbone.blocks_per_stage", "must be >= 1")
    _require(
        len(b.range_bounds) >= 1 and all(x > y for x, y in zip(b.range_bounds, b.range_bounds[1:])),
        "backbone.range_bounds", "must be strictly decreasing",
    )
    _require(b.canonical_size == d.canonical_size, "backbone.canonical_size", "must match dataset.canonical_size")
    for name in ("lambda1", "lambda2", "lambda_s", "lambda_f"):
        _require(getattr(l, name) >= 0, f"loss.{name}", "must be >= 0")
    _require(l.tau > 0, "loss.tau", "must be > 0")
    _require(l.queue_capacity >= 0, "loss.queue_capacity", "must be >= 0")
    _require(t.total_steps >= 1, "train.total_steps", "must be >= 1")
    _require(t.batch_size >= 1, "train.batch_size", "must be >= 1")
    _require(t.learning_rate > 0, "train.learning_rate", "must be > 0")
    _require(0.0 <= t.augment.flip_prob <= 1.0, "train.augment.flip_prob", "must be in [0, 1]")
    _require(t.augment.noise_sigma >= 0, "train.augment.noise_sigma", "must be >= 0")
    _require(t.augment.jitter >= 0, "train.augment.jitter", "must be >= 0")
    _require(t.augment.rotation_deg >= 0, "train.augment.rotation_deg", "must be >= 0")
    if t.stages is not None:
        try:
            validate_stages(t.stages, len(b.range_bounds))
        except Exception as exc:
            raise ConfigError(f"train.stages: {exc}") from exc
    tm, tx = cfg.temporal, cfg.texture
    _require(tm.seq_length >= 3, "temporal.seq_length", "must be >= 3")
    _require(tm.holdout_sequences < tm.num_sequences, "temporal.holdout_sequences", "must be < num_sequences")
    _require(4 <= tm.min_res <= tm.max_res, "temporal.min_res", "need 4 <= min_res <= max_res")
    _require(tx.internal_size % 2 ** (len(tx.widths) - 1) == 0, "texture.internal_size", "must be divisible by the downsampling factor")
    _require(4 <= tx.low_res_min <= tx.low_res_max, "texture.low_res_min", "need 4 <= low_res_min <= low_res_max")


def from_dict(raw: dict) -> RunConfig:
    """Validate a raw nested dict and materialize every default."""
    cfg = _parse_section(RunConfig, raw, "")
    _check(cfg)
    return cfg


def parse_config(path: str) -> RunConfig:
    try:
        raw = arrayio.load_json(path)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except ValueError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return from_dict(raw)


def to_dict(cfg: RunConfig) -> dict:
    """Canonical nested dict form; lists for tuples, all defaults explicit."""

    def conv(value):
        if dataclasses.is_dataclass(value):
            return {f.name: conv(getattr(value, f.name)) for f in dataclasses.fields(value)}
        if isinstance(value, tuple):
            return [conv(v) for v in value]
        return value

    return conv(cfg)


def write_resolved(cfg: RunConfig, out_dir: str, name: str = "config_resolved.json") -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    arrayio.dump_json(to_dict(cfg), path)
    return path
