"""Run configuration: INI-style file with one section per subsystem.

Unknown sections or keys are rejected so typos fail loudly. Flags on the CLI
override file values; file values override the built-in defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .model_core import ModelConfig
from .objective import LossWeights
from .split_scheme import SplitConfig
from .synthetic_data import SynthConfig
from .training import DEFAULT_ID_CHANNELS, OptimConfig


@dataclass
class ChannelsConfig:
    id_channels: tuple[str, ...] = DEFAULT_ID_CHANNELS
    heldout_channels: tuple[str, ...] = ("ER", "cyRNA")


@dataclass
class EvalConfig:
    n_control: int = 100
    n_heldout: int = 30
    probe_epochs: int = 100
    n_subsets: int = 10
    n_folds: int = 5
    triplet_margin: float = 1.0
    triplet_epochs: int = 500
    triplet_hidden: int = 1024
    triplet_out_dim: int = 128
    triplet_lr: float = 1e-3
    wells_per_batch: int = 16
    tiles_per_well: int = 4
    seed: int = 0


@dataclass
class DataConfig:
    data_dir: str = ""


@dataclass
class LossConfig(LossWeights):
    masked_only: bool = False

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_s, self.lambda_h, self.lambda_l, self.lambda_f, self.h, self.l)


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    channels: ChannelsConfig = field(default_factory=ChannelsConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _convert(raw: str, current):
    if isinstance(current, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(s.strip() for s in raw.split(",") if s.strip())
    return raw


def parse_run_config(path: str | Path | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    sections = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for section in parser.sections():
        if section not in sections:
            raise ConfigError(f"unknown config section [{section}]")
        target = sections[section]
        valid = {f.name for f in fields(target)}
        updates = {}
        for key, raw in parser.items(section):
            if key not in valid:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            try:
                updates[key] = _convert(raw, getattr(target, key))
            except ValueError as exc:
                raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from exc
        setattr(cfg, section, dataclasses.replace(target, **updates))
    return cfg


def preset_path(name: str) -> Path:
    path = Path(__file__).parent / "presets" / f"{name}.ini"
    if not path.exists():
        raise ConfigError(f"no preset named {name!r}")
    return path


def config_echo(cfg: RunConfig) -> dict:
    return {name: dataclasses.asdict(getattr(cfg, name)) for name in (f.name for f in fields(cfg))}
