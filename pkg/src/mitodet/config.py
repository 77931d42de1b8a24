"""JSON run configuration: one file drives every CLI subcommand.

Unknown keys are rejected everywhere so typos fail loudly, and a config
serialized back to JSON reloads to an identical object.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .detector import DetectorConfig
from .domain_head import DomainHeadConfig
from .stain import BetaSpec, StainProfile
from .synth import SynthConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.403
    match_radius: float = 30.0
    merge_radius: float = 25.0
    base_threshold: float = 0.05
    patch_size: int = 1280
    patch_count: int = 30
    patch_keep: int = 10

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must be in [0,1], got {self.threshold}")
        if self.match_radius <= 0 or self.merge_radius <= 0:
            raise ValueError("radii must be positive")


@dataclass
class RunConfig:
    detector: DetectorConfig = dataclasses.field(default_factory=DetectorConfig)
    dac_head: DomainHeadConfig = dataclasses.field(
        default_factory=DomainHeadConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    synth: SynthConfig = dataclasses.field(default_factory=SynthConfig)
    eval: EvalConfig = dataclasses.field(default_factory=EvalConfig)
    dataset_dir: str = None
    # per-domain stain overrides: "scanner,tissue" -> channel -> [a,b,scale,shift]
    stain_profiles: dict = None


_SECTIONS = {
    "detector": DetectorConfig,
    "dac_head": DomainHeadConfig,
    "train": TrainConfig,
    "synth": SynthConfig,
    "eval": EvalConfig,
}


def _deep_tuple(value):
    if isinstance(value, list):
        return tuple(_deep_tuple(v) for v in value)
    return value


def _build_section(cls, data: dict, context: str):
    field_names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - field_names)
    if unknown:
        raise ValueError(f"unknown keys in {context}: {unknown}")
    defaults = cls()
    kwargs = {}
    for key, value in data.items():
        if isinstance(getattr(defaults, key), tuple):
            value = _deep_tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    top = set(_SECTIONS) | {"dataset_dir", "stain_profiles"}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ValueError(f"unknown top-level config keys: {unknown}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = data.get(name, {})
        if not isinstance(section, dict):
            raise ValueError(f"config section '{name}' must be an object")
        kwargs[name] = _build_section(cls, section, name)
    kwargs["dataset_dir"] = data.get("dataset_dir")
    kwargs["stain_profiles"] = data.get("stain_profiles")
    return RunConfig(**kwargs)


def config_to_dict(cfg: RunConfig) -> dict:
    out = {name: dataclasses.asdict(getattr(cfg, name)) for name in _SECTIONS}
    out["dataset_dir"] = cfg.dataset_dir
    out["stain_profiles"] = cfg.stain_profiles
    return out


def load_config(path) -> RunConfig:
    path = Path(path)
    cfg = config_from_dict(json.loads(path.read_text()))
    if cfg.dataset_dir is not None and not Path(cfg.dataset_dir).exists():
        raise FileNotFoundError(f"dataset_dir does not exist: {cfg.dataset_dir}")
    return cfg


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2,
                                     sort_keys=True) + "\n")


def default_config() -> RunConfig:
    return RunConfig()


def parse_stain_profiles(overrides: dict) -> dict:
    """Config stain overrides -> {(scanner, tissue): StainProfile}."""
    profiles = {}
    for key, channels in overrides.items():
        scanner, tissue = (int(v) for v in key.split(","))
        specs = {}
        for ch in ("h", "e", "d"):
            if ch not in channels:
                raise ValueError(f"stain profile {key} missing channel '{ch}'")
            a, b, scale, shift = channels[ch]
            specs[ch] = BetaSpec(a=a, b=b, scale=scale, shift=shift)
        profiles[(scanner, tissue)] = StainProfile(
            (scanner, tissue), specs["h"], specs["e"], specs["d"])
    return profiles
