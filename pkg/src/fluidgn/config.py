"""Run configuration: YAML loading, strict validation, paper-default snapshot.

Defaults carry the reference constants (connectivity radii 0.12/0.19, ten
128-wide processor blocks, noise sigma 6.7e-4, lr 1e-4 -> 1e-6, batch 20);
desk-scale runs override them through config files.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, is_dataclass

import yaml

from .control import MpcConfig
from .graph import GraphConfig
from .learn import TrainConfig
from .net import NetConfig
from .oracle import PbdConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatagenConfig:
    train_episodes: int = 40
    test_episodes: int = 8
    frames: int = 150
    n_particles: int = 216
    scenario_mix: dict = field(
        default_factory=lambda: {"translation": 0.35, "rotation": 0.45, "full_body": 0.2}
    )
    noise_fraction: float = 0.3  # episodes with perturbed jug motion
    jug: str = "box_jug"
    cup: str = "cone_cup"
    calibration_samples: int = 6

    def __post_init__(self):
        from .oracle import SCENARIO_KINDS

        unknown = set(self.scenario_mix) - set(SCENARIO_KINDS)
        if unknown:
            raise ValueError(f"unknown scenario kind '{sorted(unknown)[0]}' in scenario_mix")
        if not (0.0 <= self.noise_fraction <= 1.0):
            raise ValueError("noise_fraction must be within [0, 1]")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["scenario_mix"] = dict(self.scenario_mix)
        return d


@dataclass
class RunConfig:
    seed: int = 0
    net: NetConfig = field(default_factory=NetConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pbd: PbdConfig = field(default_factory=PbdConfig)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    datagen: DatagenConfig = field(default_factory=DatagenConfig)


def _build_section(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section '{path}' must be a mapping")
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown key '{path}.{sorted(unknown)[0]}'")
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if f.name == "gravity" and isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section '{path}': {exc}") from exc


_SECTIONS = {
    "net": NetConfig,
    "graph": GraphConfig,
    "train": TrainConfig,
    "pbd": PbdConfig,
    "mpc": MpcConfig,
    "datagen": DatagenConfig,
}


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(data) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown key '{sorted(unknown)[0]}'")
    cfg = RunConfig()
    if "seed" in data:
        if not isinstance(data["seed"], int):
            raise ConfigError("seed must be an integer")
        cfg.seed = data["seed"]
    for name, cls in _SECTIONS.items():
        if name in data:
            setattr(cfg, name, _build_section(cls, data[name], name))
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(data)


def snapshot(cfg: RunConfig) -> dict:
    """Stable nested-dict view of a config, embedded in artifacts."""

    def as_dict(obj):
        out = {}
        for f in fields(obj):
            v = getattr(obj, f.name)
            if is_dataclass(v):
                v = as_dict(v)
            elif isinstance(v, tuple):
                v = list(v)
            elif isinstance(v, dict):
                v = dict(v)
            out[f.name] = v
        return out

    return as_dict(cfg)
