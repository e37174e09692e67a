"""Experiment configuration: nested dataclasses, YAML/JSON loading, dotted overrides."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .augment import AugConfig
from .flownet import FlowNetConfig
from .losses import CharbonnierParams, StageOneWeights
from .synthesis import GARMENT, SYNTHESIS, SynthConfig
from .types import NUM_GARMENTS, NUM_PARTS


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    num_parts: int = NUM_PARTS
    num_garments: int = NUM_GARMENTS
    size: int = 64
    residue_fill: str = "diffusion"


@dataclass
class FlowSection:
    width: int = 64
    leaky_slope: float = 0.1


@dataclass
class SynthSection:
    width: int = 64
    max_mult: int = 4
    num_res_blocks: int = 7
    norm: str = "instance"
    leaky_slope: float = 0.2
    attention: bool = True
    use_flow: bool = True


@dataclass
class LossConfig:
    charbonnier_eps: float = 1e-3
    charbonnier_alpha: float = 0.45
    s: tuple = (1.0, 1.0, 0.5, 0.25, 0.125, 0.0)
    beta: tuple = (0.002, 0.002, 0.002, 0.002, 0.0, 0.0)
    gamma: tuple = (0.1, 0.1, 0.1, 0.1, 0.0, 0.0)
    feature_backend: str = "random"
    feature_seed: int = 0

    def charbonnier(self) -> CharbonnierParams:
        return CharbonnierParams(self.charbonnier_eps, self.charbonnier_alpha)

    def stage_one(self) -> StageOneWeights:
        return StageOneWeights(self.s, self.beta, self.gamma)


@dataclass
class WarpSection:
    padding: str = "border"


@dataclass
class SelfSupSection:
    ratio: float = 0.25  # flow stage
    direction: str = "target"
    synth_ratio: float = 0.25  # synthesis stage, source <- Aug(target)


@dataclass
class TrainConfig:
    lr_gen: float = 1e-4
    lr_disc: float = 4e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    epochs: tuple = (20, 20, 40)  # flow, garment, synthesis
    steps: int = 0  # > 0 overrides epochs with a fixed step count
    batch_size: int = 8
    seed: int = 0
    lambdas: tuple = (1.0, 0.1, 0.002, 0.5)
    workers: int = 1
    checkpoint_every: int = 1  # epochs
    teacher_forcing: bool = False
    disc_pose_cond: bool = False
    disc_width: int = 64
    power_iters: int = 1  # minimum per refresh
    power_tol: float = 1e-5  # keep iterating until sigma changes by less than this (relative); 0 = fixed count

    def __post_init__(self):
        self.epochs = tuple(int(e) for e in self.epochs)
        self.lambdas = tuple(float(x) for x in self.lambdas)
        if len(self.lambdas) != 4:
            raise ConfigError("train.lambdas must have 4 entries")
        if len(self.epochs) != 3:
            raise ConfigError("train.epochs must have 3 entries (flow, garment, synthesis)")
        for name in ("lr_gen", "lr_disc", "adam_beta1", "adam_beta2", "batch_size", "workers", "checkpoint_every", "power_iters"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"train.{name} must be positive")
        if self.power_tol < 0:
            raise ConfigError("train.power_tol must be >= 0")
        if any(e < 0 for e in self.epochs) or self.steps < 0:
            raise ConfigError("epochs and steps must be >= 0")


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    flow: FlowSection = field(default_factory=FlowSection)
    synth: SynthSection = field(default_factory=SynthSection)
    loss: LossConfig = field(default_factory=LossConfig)
    warp: WarpSection = field(default_factory=WarpSection)
    aug: AugConfig = field(default_factory=AugConfig)
    selfsup: SelfSupSection = field(default_factory=SelfSupSection)
    train: TrainConfig = field(default_factory=TrainConfig)

    def flow_net(self) -> FlowNetConfig:
        return FlowNetConfig(self.data.num_parts, self.flow.width, self.flow.leaky_slope)

    def synth_net(self, kind: str) -> SynthConfig:
        s = self.synth
        return SynthConfig(
            kind=kind, num_parts=self.data.num_parts, num_garments=self.data.num_garments, width=s.width,
            max_mult=s.max_mult, num_res_blocks=s.num_res_blocks, norm=s.norm, leaky_slope=s.leaky_slope,
            attention=s.attention, use_flow=s.use_flow, padding=self.warp.padding,
        )

    def garment_net(self) -> SynthConfig:
        return self.synth_net(GARMENT)

    def synthesis_net(self) -> SynthConfig:
        return self.synth_net(SYNTHESIS)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def toy_config(**overrides) -> Config:
    """Desk-scale defaults: narrow networks, small batches."""
    cfg = Config()
    cfg.flow.width = 32
    cfg.synth.width = 16
    cfg.train.batch_size = 2
    cfg.train.disc_width = 16
    return apply_overrides(cfg, overrides)


def _coerce(value, current, key):
    if isinstance(current, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: cannot parse {value!r} as bool")
        return bool(value)
    if isinstance(current, tuple):
        if isinstance(value, str):
            value = [v for v in value.replace("(", "").replace(")", "").split(",") if v.strip()]
        elem = type(current[0]) if current else float
        try:
            return tuple(elem(v) for v in value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{key}: bad sequence {value!r}") from e
    if isinstance(current, (int, float)):
        try:
            x = float(value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{key}: bad number {value!r}") from e
        if isinstance(current, int):
            if not x.is_integer():
                raise ConfigError(f"{key}: expected an integer, got {value!r}")
            return int(x)
        return x
    return type(current)(value) if current is not None else value


def set_key(cfg: Config, key: str, value):
    section, _, name = key.partition(".")
    if not name:
        raise ConfigError(f"config key {key!r} must be of the form section.field")
    sec = getattr(cfg, section, None)
    if sec is None or not is_dataclass(sec):
        raise ConfigError(f"unknown config section {section!r}")
    names = {f.name for f in fields(sec)}
    if name not in names:
        raise ConfigError(f"unknown config key {key!r}")
    setattr(sec, name, _coerce(value, getattr(sec, name), key))


def _revalidate(cfg: Config) -> Config:
    try:
        for f in fields(cfg):
            sec = getattr(cfg, f.name)
            if hasattr(sec, "__post_init__"):
                sec.__post_init__()
        cfg.loss.stage_one()
        cfg.loss.charbonnier()
        cfg.synth_net(SYNTHESIS)
        from .augment import SelfSupConfig

        SelfSupConfig(cfg.selfsup.ratio, cfg.selfsup.direction)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return cfg


def apply_overrides(cfg: Config, overrides: dict) -> Config:
    for k, v in overrides.items():
        set_key(cfg, k, v)
    return _revalidate(cfg)


def _flatten(d: dict, prefix="") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_config(source=None, overrides: dict = None, base: Config = None) -> Config:
    """Load a YAML/JSON file or mapping (nested or dotted keys); unknown keys are rejected."""
    cfg = base if base is not None else Config()
    data = {}
    if isinstance(source, (str, Path)):
        try:
            data = yaml.safe_load(Path(source).read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {source}: {e}") from e
    elif isinstance(source, dict):
        data = source
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    flat = _flatten(data)
    flat.update(overrides or {})
    return apply_overrides(cfg, flat)


def dump_config(cfg: Config) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def config_keys(cfg: Config = None) -> list:
    cfg = cfg or Config()
    return [f"{s.name}.{f.name}" for s in fields(cfg) for f in fields(getattr(cfg, s.name))]
