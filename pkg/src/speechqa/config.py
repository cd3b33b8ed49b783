"""Plain-text configuration (INI sections) with environment overrides.

Every synthesis parameter defaults to its standard operating point (voice
65 +- 8 dB SPL, noise 45 +- 15 dB SPL, half the dataset processed); model and
training fields default to the full-scale architectures. Environment
variables named SPEECHQA_<SECTION>_<KEY> override file values, for CI use.
"""

import configparser
import os
from dataclasses import dataclass, field, fields

from .dataset import SynthConfig
from .errors import ConfigError
from .models import TrainConfig
from .pipeline import IvecConfig

ENV_PREFIX = "SPEECHQA"


@dataclass
class ModelOverrides:
    hidden: tuple = ()          # empty -> architecture default
    dropout: float | None = None
    lr: float | None = None
    aggregation: str = "mean"
    elm_hidden: int = 512
    elm_ridge: float = 1e-6
    windows_per_utt: int = 30

    def spec_kwargs(self):
        kwargs = {"aggregation": "mean" if self.aggregation == "elm"
                  else self.aggregation}
        if self.hidden:
            kwargs["hidden"] = self.hidden
        if self.dropout is not None:
            kwargs["dropout"] = self.dropout
        if self.lr is not None:
            kwargs["lr"] = self.lr
        return kwargs


@dataclass
class Config:
    data_dir: str = "data"
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    ivec: IvecConfig = field(default_factory=IvecConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelOverrides = field(default_factory=ModelOverrides)
    label_file: str = ""        # external (id, MOS) labels; empty -> proxy oracle

    def __post_init__(self):
        self.synth.seed = self.seed
        self.ivec.seed = self.seed
        self.train.seed = self.seed


_SECTIONS = {"synth": SynthConfig, "ivec": IvecConfig,
             "train": TrainConfig, "model": ModelOverrides}


def _coerce(value, target_type):
    if target_type is bool:
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"bad boolean {value!r}")
    if target_type is tuple:
        return tuple(int(v) for v in value.split(",") if v.strip())
    if target_type in (int, float, str):
        return target_type(value)
    # Optional[float] style fields
    return float(value)


def _apply(obj, key, raw):
    matching = {f.name: f for f in fields(obj)}
    if key not in matching:
        raise ConfigError(f"unknown config key {key!r} for {type(obj).__name__}")
    current = getattr(obj, key)
    target = type(current) if current is not None else float
    try:
        setattr(obj, key, _coerce(raw, target))
    except (ValueError, ConfigError) as exc:
        raise ConfigError(f"bad value {raw!r} for {key}: {exc}") from exc


def load_config(path=None, env=None):
    """Config from an INI file plus SPEECHQA_SECTION_KEY env overrides."""
    cfg = Config()
    parser = configparser.ConfigParser()
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file {path} not found")
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser.items(section):
                _route(cfg, section, key, raw)
    env = os.environ if env is None else env
    for name, raw in env.items():
        if not name.startswith(ENV_PREFIX + "_"):
            continue
        parts = name[len(ENV_PREFIX) + 1:].lower().split("_", 1)
        if len(parts) != 2:
            continue
        _route(cfg, parts[0], parts[1], raw)
    cfg.__post_init__()
    return cfg


def _route(cfg, section, key, raw):
    if section == "main":
        _apply(cfg, key, raw)
    elif section in _SECTIONS:
        _apply(getattr(cfg, section), key, raw)
    else:
        raise ConfigError(f"unknown config section [{section}]")


def dump_config(cfg):
    """Round-trippable INI text for the current configuration."""
    lines = ["[main]", f"data_dir = {cfg.data_dir}", f"seed = {cfg.seed}",
             f"label_file = {cfg.label_file}"]
    for section, obj in (("synth", cfg.synth), ("ivec", cfg.ivec),
                         ("train", cfg.train), ("model", cfg.model)):
        lines.append(f"\n[{section}]")
        for f in fields(obj):
            value = getattr(obj, f.name)
            if value is None:
                continue            # unset optional field, keep the default
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
