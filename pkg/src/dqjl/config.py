"""Run configuration: INI files with one section per component.

Example::

    [run]
    seed = 1

    [road]
    segment_length_m = 60.0
    pad_size = 8

    [scenario]
    spacing_m_per_veh = 10.0

    [train]
    variant = ddqn
    episodes = 1500

    [sweep]
    spacings = 7.5, 10.0, 12.5, 15.0
    speeds = 3.0, 5.0, 8.0
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
import io
from pathlib import Path
import types
import typing
from typing import Any

from dqjl.agent import TrainConfig
from dqjl.env import RoadConfig
from dqjl.errors import ConfigError
from dqjl.rollout import DEFAULT_EMV_LENGTH_M, DEFAULT_TRIGGER_M
from dqjl.scenario import ScenarioSpec


@dataclass(frozen=True)
class SweepConfig:
    spacings: tuple[float, ...] = (7.5, 10.0, 12.5, 15.0)
    speeds: tuple[float, ...] = (3.0, 5.0, 8.0)
    runs_per_cell: int = 5
    trigger_m: float = DEFAULT_TRIGGER_M
    emv_length_m: float = DEFAULT_EMV_LENGTH_M
    jobs: int = 1


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    eval_rollouts: int = 100


@dataclass(frozen=True)
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    road: RoadConfig = field(default_factory=RoadConfig)
    scenario: ScenarioSpec = field(default_factory=lambda: ScenarioSpec(spacing_m_per_veh=12.5))
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.run.seed)


SECTIONS = ("run", "road", "scenario", "train", "sweep")


def _parse_value(raw: str, hint: Any, key: str) -> Any:
    raw = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if raw.lower() in ("", "none"):
            return None
        inner = [a for a in args if a is not type(None)]
        return _parse_value(raw, inner[0], key)
    if origin is tuple:
        parts = [p for p in raw.split(",") if p.strip()]
        elem = args[0] if args else float
        return tuple(_parse_value(p, elem, key) for p in parts)
    try:
        if hint is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} for {key}") from exc


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _build(cls, base, values: dict[str, str], section: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    changes = {}
    for key, raw in values.items():
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        changes[key] = _parse_value(raw, hints[key], f"{section}.{key}")
    try:
        return replace(base, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] settings: {exc}") from exc


def apply_overrides(cfg: RunConfig, overrides: dict[str, dict[str, str]]) -> RunConfig:
    """Apply ``{section: {key: raw_string}}`` on top of ``cfg``."""
    parts = {}
    for section in SECTIONS:
        current = getattr(cfg, section)
        values = overrides.get(section, {})
        parts[section] = _build(type(current), current, values, section) if values else current
    for section in overrides:
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
    return RunConfig(**parts)


def loads_config(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    overrides = {s: dict(parser.items(s)) for s in parser.sections()}
    return apply_overrides(base or RunConfig(), overrides)


def load_config(path: str | Path | None, base: RunConfig | None = None) -> RunConfig:
    if path is None:
        return base or RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads_config(text, base)


def dumps_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section in SECTIONS:
        obj = getattr(cfg, section)
        parser[section] = {f.name: _format_value(getattr(obj, f.name)) for f in fields(obj)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
