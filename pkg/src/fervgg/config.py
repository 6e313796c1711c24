"""Run configuration: INI sections ``model``, ``optim``, ``sched``, ``data``, ``train``.

Values are parsed according to the dataclass field types; tuples are
comma-separated. Unknown sections or keys are rejected. ``to_ini`` writes
the effective configuration in the same format, so an echoed file can be
fed back in unchanged.

Example::

    [model]
    stage_widths = 8, 16, 32, 64
    fc_widths = 64, 32

    [optim]
    kind = sgd-nesterov

    [sched]
    kind = rlrp
    lr0 = 0.01

    [train]
    epochs = 300
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional

from .data import AugmentConfig
from .errors import ConfigError
from .model import SCALED_CONFIG, VggConfig
from .optim import HyperParams, normalize_kind as normalize_optim
from .sched import SchedConfig


@dataclass
class OptimConfig:
    kind: str = "sgd-nesterov"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: Optional[float] = None
    rho: float = 0.9
    t0: int = 0

    def __post_init__(self):
        self.kind = normalize_optim(self.kind)

    def hyperparams(self, lr: float) -> HyperParams:
        return HyperParams(lr=lr, momentum=self.momentum, weight_decay=self.weight_decay,
                           beta1=self.beta1, beta2=self.beta2, eps=self.eps, rho=self.rho, t0=self.t0)


@dataclass
class DataConfig(AugmentConfig):
    train_split: str = "Training"
    val_split: str = "PublicTest"
    test_split: str = "PrivateTest"
    train_crops: str = "ten"
    limit_per_class: int = 0

    def __post_init__(self):
        super().__post_init__()
        if self.train_crops not in ("ten", "random-one"):
            raise ValueError("train_crops must be ten or random-one")


@dataclass
class TrainConfig:
    epochs: int = 300
    finetune_epochs: int = 50
    finetune_lr: float = 1e-4
    batch_size: int = 64
    seed: int = 0
    loss_scale: float = 1.0
    average: str = "prob"
    log_wall_time: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.finetune_epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.loss_scale > 0:
            raise ValueError("loss_scale must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.average not in ("prob", "logit"):
            raise ValueError("average must be prob or logit")


@dataclass
class RunConfig:
    model: VggConfig = field(default_factory=VggConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    sched: SchedConfig = field(default_factory=SchedConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)

    def to_ini(self) -> str:
        lines = []
        for section in SECTIONS:
            obj = getattr(self, section)
            lines.append(f"[{section}]")
            for f in dataclasses.fields(obj):
                lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)


SECTIONS = ("model", "optim", "sched", "data", "train")


def scaled_model_overrides() -> Dict[str, str]:
    return {f"model.{k}": _format(v) for k, v in SCALED_CONFIG.items()}


def _format(value) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw: str, tp, name: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union and type(None) in args:
        if raw.lower() in ("none", ""):
            return None
        inner = next(a for a in args if a is not type(None))
        return _coerce(raw, inner, name)
    if origin is tuple:
        return tuple(_coerce(p, args[0], name) for p in raw.split(",") if p.strip())
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {tp.__name__}") from None
    return raw


def _build_section(cls, values: Dict[str, str], section: str):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key}")
        kwargs[key] = _coerce(raw, hints[key], f"{section}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


_SECTION_TYPES = {"model": VggConfig, "optim": OptimConfig, "sched": SchedConfig,
                  "data": DataConfig, "train": TrainConfig}


def parse_overrides(items: Iterable[str]) -> Dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        out[key.strip()] = value.strip()
    return out


def load_config(text: Optional[str] = None, overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    """Merge INI ``text`` with ``section.key -> value`` overrides and validate everything."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    if text:
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
    values: Dict[str, Dict[str, str]] = {s: {} for s in SECTIONS}
    for section in parser.sections():
        if section not in values:
            raise ConfigError(f"unknown section [{section}]")
        values[section].update(parser[section])
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in values:
            raise ConfigError(f"unknown section in override {dotted!r}")
        values[section][key] = value
    return RunConfig(**{s: _build_section(_SECTION_TYPES[s], values[s], s) for s in SECTIONS})


def read_config(path=None, overrides=None) -> RunConfig:
    text = None
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    return load_config(text, overrides)
