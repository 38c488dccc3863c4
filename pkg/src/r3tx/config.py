"""Plain-text ``section.key = value`` configuration files."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Tuple

from .errors import ConfigError
from .model import R3Config
from .synth import WorldSpec

VARIANTS = ("r3", "baseline")


@dataclass
class RunConfig:
    model: R3Config = field(default_factory=R3Config)
    world: WorldSpec = field(default_factory=WorldSpec)
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    report_dir: str = "reports"
    episodes: int = 2000
    train_fraction: float = 0.8
    steps: int = 2000
    eval_every: int = 500
    log_every: int = 50
    variant: str = "r3"
    seed: int = 0

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.world.validate()
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.model.d_feat != self.world.d_feat:
            raise ConfigError("model.d_feat must equal world.d_feat")
        if self.world.max_events * self.world.slots_per_event > self.model.T:
            raise ConfigError("model.T is too small for the world's episode length")
        if self.steps < 0 or self.eval_every < 1 or self.log_every < 1 or self.episodes < 0:
            raise ConfigError("steps must be nonnegative; eval_every, log_every positive")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigError("train_fraction must lie in (0, 1]")
        return self

    def model_config(self) -> R3Config:
        """Model config with the variant applied (baseline = SR branch fixed to ones)."""
        cfg = dataclasses.replace(self.model)
        if self.variant == "baseline":
            cfg.sr_mode = "ones"
        return cfg


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, tp, name: str):
    try:
        if tp is bool:
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        if typing.get_origin(tp) is tuple:
            return tuple(s.strip() for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {tp}") from None
    raise ConfigError(f"{name}: unsupported field type {tp}")


def dataclass_to_lines(obj, prefix: str) -> list:
    return [f"{prefix}.{f.name} = {_format(getattr(obj, f.name))}" for f in dataclasses.fields(obj)]


def dumps(cfg: RunConfig) -> str:
    lines = dataclass_to_lines(cfg.model, "model") + dataclass_to_lines(cfg.world, "world")
    for f in dataclasses.fields(cfg):
        if f.name not in ("model", "world"):
            lines.append(f"run.{f.name} = {_format(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def parse_lines(text: str) -> Dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _apply(obj, values: Dict[str, str], prefix: str) -> None:
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    for key, text in values.items():
        if key not in names:
            raise ConfigError(f"unknown key {prefix}.{key}")
        setattr(obj, key, _parse(text, hints[key], f"{prefix}.{key}"))


def loads(text: str, base: RunConfig = None) -> RunConfig:
    cfg = base or RunConfig()
    groups: Dict[str, Dict[str, str]] = {"model": {}, "world": {}, "run": {}}
    for key, value in parse_lines(text).items():
        section, _, name = key.partition(".")
        if section not in groups or not name:
            raise ConfigError(f"unknown key {key}; expected model.*, world.* or run.*")
        groups[section][name] = value
    _apply(cfg.model, groups["model"], "model")
    _apply(cfg.world, groups["world"], "world")
    run_values = {k: v for k, v in groups["run"].items()}
    for nested in ("model", "world"):
        if nested in run_values:
            raise ConfigError(f"run.{nested} is not a scalar key")
    _apply(cfg, run_values, "run")
    return cfg


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads(text)


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(dumps(cfg))


def model_config_from_lines(values: Dict[str, str]) -> R3Config:
    cfg = R3Config()
    _apply(cfg, {k.partition(".")[2]: v for k, v in values.items() if k.startswith("model.")}, "model")
    return cfg


def model_config_lines(cfg: R3Config) -> str:
    return "\n".join(dataclass_to_lines(cfg, "model")) + "\n"


def override(cfg: RunConfig, pairs: Tuple[str, ...]) -> RunConfig:
    """Apply ``section.key=value`` overrides given on the command line."""
    return loads("\n".join(pairs), cfg) if pairs else cfg
