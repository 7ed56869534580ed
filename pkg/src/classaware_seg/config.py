"""Run configuration: sectioned key=value files, dot-path overrides, content hashing.

A config file looks like::

    [lca]
    patches = 4x4
    heads = 8

    [train]
    iterations = 2000

Every key can also be overridden from the command line as ``--lca.patches 8x8``.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    dataset: str = "synth"  # "synth" or a dataset root in the tiled on-disk layout
    train_split: str = "train"
    eval_split: str = "val"
    num_classes: int = 4
    image_size: int = 128
    n_train: int = 50
    n_eval: int = 20
    seed: int = 0
    augment: bool = True
    flip_prob: float = 0.5
    scale_range: tuple[float, float] = (0.5, 1.5)
    photometric: bool = True
    workers: int = 0


@dataclass
class EncoderConfig:
    channels: tuple[int, ...] = (16, 32, 64, 128)
    norm: str = "batch"  # batch | group | none
    act: str = "relu"  # relu | leaky_relu | gelu


@dataclass
class GCAConfig:
    enabled: bool = True
    cg_layer: int = 4  # backbone stage (1..4) the global centers are pooled from


@dataclass
class LCAConfig:
    enabled: bool = True
    patches: tuple[int, int] = (4, 4)
    heads: int = 8
    tie_value_heads: bool = False


@dataclass
class ATBConfig:
    scale: bool = True
    rotation: bool = True
    offset: bool = True


@dataclass
class DecoderConfig:
    width: int = 32
    fusion: str = "conv3x3"  # conv3x3 | conv1x1


@dataclass
class LossConfig:
    main: float = 1.0
    aux: float = 0.8
    aux_stages: str = "all"  # all | deepest


@dataclass
class TrainConfig:
    iterations: int = 80000
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    poly_power: float = 0.9
    seed: int = 0
    log_every: int = 50


@dataclass
class EvalConfig:
    scales: tuple[float, ...] = (1.0,)
    flip: bool = False
    tile: int = 0  # 0: whole image in one pass
    stride: int = 0

    def __post_init__(self):
        for s in self.scales:
            if not 0.5 <= s <= 1.5:
                raise ConfigError(f"eval scale {s} outside [0.5, 1.5]")


# Scale set used when multi-scale testing is switched on.
DEFAULT_TTA_SCALES = (0.5, 0.75, 1.0, 1.25, 1.5)

SECTIONS = {
    "data": DataConfig,
    "encoder": EncoderConfig,
    "gca": GCAConfig,
    "lca": LCAConfig,
    "atb": ATBConfig,
    "decoder": DecoderConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    gca: GCAConfig = field(default_factory=GCAConfig)
    lca: LCAConfig = field(default_factory=LCAConfig)
    atb: ATBConfig = field(default_factory=ATBConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.data.num_classes < 2:
            raise ConfigError("data.num_classes must be >= 2")
        if len(self.encoder.channels) != 4 or min(self.encoder.channels) <= 0:
            raise ConfigError("encoder.channels needs four positive widths")
        if self.gca.cg_layer not in (1, 2, 3, 4):
            raise ConfigError("gca.cg_layer must be one of 1..4")
        if min(self.lca.patches) < 1:
            raise ConfigError("lca.patches must be >= 1x1")
        if self.lca.heads < 1 or self.decoder.width % self.lca.heads:
            raise ConfigError(
                f"lca.heads={self.lca.heads} must divide decoder.width={self.decoder.width}")
        if self.loss.main < 0 or self.loss.aux < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.loss.aux_stages not in ("all", "deepest"):
            raise ConfigError("loss.aux_stages must be 'all' or 'deepest'")
        t = self.train
        if t.iterations < 0 or t.batch_size < 1 or t.lr <= 0 or t.poly_power <= 0:
            raise ConfigError("train section has non-positive values")
        lo, hi = self.data.scale_range
        if not 0 < lo <= hi:
            raise ConfigError("data.scale_range must satisfy 0 < min <= max")

    # -- serialization -------------------------------------------------

    def to_text(self) -> str:
        buf = io.StringIO()
        for name in SECTIONS:
            section = getattr(self, name)
            buf.write(f"[{name}]\n")
            for f in dataclasses.fields(section):
                buf.write(f"{f.name} = {_format_value(getattr(section, f.name))}\n")
            buf.write("\n")
        return buf.getvalue()

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]

    def get(self, key: str) -> Any:
        section, name = _split_key(key)
        return getattr(getattr(self, section), name)

    def replace(self, overrides: dict[str, Any]) -> "RunConfig":
        """Return a validated copy with dot-path keys replaced.

        Values may be strings (parsed with the field's type) or already-typed.
        """
        sections = {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}
        for key, value in overrides.items():
            section, name = _split_key(key)
            if name not in sections[section]:
                raise ConfigError(f"unknown config key {key!r}")
            default = sections[section][name]
            sections[section][name] = _parse_value(value, default, key) if isinstance(value, str) else _coerce(value, default)
        try:
            built = {name: SECTIONS[name](**vals) for name, vals in sections.items()}
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return RunConfig(**built)


def _split_key(key: str) -> tuple[str, str]:
    if "." not in key:
        raise ConfigError(f"config key {key!r} must look like section.name")
    section, name = key.split(".", 1)
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section {section!r}")
    return section, name


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def _coerce(value, default):
    if isinstance(default, tuple):
        return tuple(value)
    return value


def _parse_value(text: str, default: Any, key: str) -> Any:
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            sep = "x" if "x" in text else ","
            parts = [p for p in text.replace(" ", "").split(sep) if p]
            elem = type(default[0]) if default else float
            return tuple(elem(p) for p in parts)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value {text!r} for {key}") from exc


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    overrides = {f"{sec}.{k}": v for sec in parser.sections() for k, v in parser.items(sec)}
    return (base or RunConfig()).replace(overrides)


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), base)


def desk_profile() -> RunConfig:
    """Small-scale settings that train on one CPU in minutes."""
    return RunConfig().replace({
        "train.iterations": 2000,
        "train.batch_size": 4,
        "train.lr": 0.02,
        "train.log_every": 100,
        "data.scale_range": (0.75, 1.25),
        "data.photometric": False,
    })
