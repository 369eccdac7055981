"""Run configuration: strict JSON with named unknown-key errors.

Every section is a dataclass with full defaults; parsing rejects keys
that are not fields (naming the offending key) and validates ranges
before any work starts.
"""

from __future__ import annotations

import dataclasses
import json
import re
import typing
from dataclasses import dataclass, field

from .losses import REGISTRY, LossConfig

__all__ = [
    "ConfigError",
    "DataSection",
    "ModelSection",
    "SplitSection",
    "GroupSection",
    "AdvSection",
    "LossSection",
    "OptimSection",
    "EvalSection",
    "RunConfig",
    "load_config",
    "config_from_dict",
    "merge_config",
    "to_loss_config",
]

SPLIT_KINDS = ("gaussian2d", "gaussian1d", "uniform")
GROUP_KINDS = ("identity", "rotation", "diffeo", "shift_rot_small")
METRICS = ("l2", "l1")
MASK_MODES = ("per_sample", "fixed")


class ConfigError(ValueError):
    """Invalid run configuration."""


@dataclass
class DataSection:
    size: int = 64
    n_train: int = 200
    n_test: int = 50
    acceleration: float = 4.0
    acs_fraction: float = 0.08
    mask_mode: str = "per_sample"
    phase: bool = True


@dataclass
class ModelSection:
    channels: int = 32
    depth: int = 3
    unrolled_iters: int = 3
    lambda_init: float = 1.0


@dataclass
class SplitSection:
    ratio: float = 0.6
    kind: str = "gaussian2d"


@dataclass
class GroupSection:
    kind: str = "diffeo"
    magnitude: float = 0.3


@dataclass
class AdvSection:
    d_lr: float = 1e-4
    schedule: str = "1:1"


@dataclass
class LossSection:
    name: str = "mc"
    metric: str = "l2"
    interleave: bool = False
    split: SplitSection = field(default_factory=SplitSection)
    group: GroupSection = field(default_factory=GroupSection)
    adversarial: AdvSection = field(default_factory=AdvSection)


@dataclass
class OptimSection:
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class EvalSection:
    n2i_splits: int = 0
    normalize: bool = False
    standardize: bool = False
    log_samples: int = 8


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    optim: OptimSection = field(default_factory=OptimSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(value, typ, path: str):
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be a boolean")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number")
        return float(value)
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string")
        return value
    raise ConfigError(f"{path} has unsupported type")


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'} must be an object")
    types = typing.get_type_hints(cls)
    known = [f.name for f in dataclasses.fields(cls)]
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key {prefix}{key}")
    kwargs = {}
    for name in known:
        if name not in data:
            continue
        typ = types[name]
        if dataclasses.is_dataclass(typ):
            kwargs[name] = _build(typ, data[name], f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(data[name], typ, f"{prefix}{name}")
    return cls(**kwargs)


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def validate(cfg: RunConfig) -> RunConfig:
    d, m, l, o, e = cfg.data, cfg.model, cfg.loss, cfg.optim, cfg.eval
    _require(d.size >= 16, "data.size must be at least 16")
    _require(d.n_train >= 1, "data.n_train must be positive")
    _require(d.n_test >= 1, "data.n_test must be positive")
    _require(d.acceleration >= 1, "data.acceleration must be at least 1")
    _require(0 <= d.acs_fraction < 1, "data.acs_fraction must lie in [0, 1)")
    _require(d.mask_mode in MASK_MODES, f"data.mask_mode must be one of {MASK_MODES}")
    _require(m.channels >= 1, "model.channels must be positive")
    _require(m.depth >= 1, "model.depth must be positive")
    _require(d.size % 2 ** (m.depth - 1) == 0,
             "data.size must be divisible by 2^(model.depth - 1)")
    _require(m.unrolled_iters >= 1, "model.unrolled_iters must be positive")
    _require(m.lambda_init > 0, "model.lambda_init must be positive")
    _require(l.name in REGISTRY, f"loss.name must be one of {sorted(REGISTRY)}")
    _require(l.metric in METRICS, f"loss.metric must be one of {METRICS}")
    _require(0 < l.split.ratio <= 1, "loss.split.ratio must lie in (0, 1]")
    _require(l.split.kind in SPLIT_KINDS, f"loss.split.kind must be one of {SPLIT_KINDS}")
    _require(l.group.kind in GROUP_KINDS, f"loss.group.kind must be one of {GROUP_KINDS}")
    _require(l.group.magnitude >= 0, "loss.group.magnitude must be non-negative")
    _require(l.adversarial.d_lr > 0, "loss.adversarial.d_lr must be positive")
    _require(re.fullmatch(r"[1-9]\d*:[1-9]\d*", l.adversarial.schedule) is not None,
             "loss.adversarial.schedule must look like 'D:G'")
    if l.interleave:
        _require(REGISTRY[l.name].discriminator is None,
                 "loss.interleave does not combine with adversarial losses")
    _require(o.lr > 0, "optim.lr must be positive")
    _require(o.epochs >= 1, "optim.epochs must be at least 1")
    _require(o.batch_size >= 1, "optim.batch_size must be positive")
    _require(0 <= o.beta1 < 1, "optim.beta1 must lie in [0, 1)")
    _require(0 <= o.beta2 < 1, "optim.beta2 must lie in [0, 1)")
    _require(o.eps > 0, "optim.eps must be positive")
    _require(e.n2i_splits >= 0, "eval.n2i_splits must be non-negative")
    _require(e.log_samples >= 0, "eval.log_samples must be non-negative")
    _require(not (e.normalize and e.standardize),
             "eval.normalize and eval.standardize are mutually exclusive")
    return cfg


def config_from_dict(data: dict) -> RunConfig:
    return validate(_build(RunConfig, data, ""))


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def _deep_merge(base: dict, overrides: dict) -> dict:
    out = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def merge_config(cfg: RunConfig, overrides: dict) -> RunConfig:
    """New validated config with nested override values applied."""
    return config_from_dict(_deep_merge(cfg.to_dict(), overrides))


def to_loss_config(cfg: RunConfig) -> LossConfig:
    return LossConfig(
        metric=cfg.loss.metric,
        split_ratio=cfg.loss.split.ratio,
        split_kind=cfg.loss.split.kind,
        group=cfg.loss.group.kind,
        group_magnitude=cfg.loss.group.magnitude,
        acceleration=cfg.data.acceleration,
        acs_fraction=cfg.data.acs_fraction,
    )
