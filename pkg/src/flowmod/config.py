"""Flat key=value run configuration with section prefixes.

The whole pipeline is driven by one RunConfig. Serialized form is plain
UTF-8 lines like ``condition.last_kernel=3x3``, diff-friendly and
round-trip-lossless; unknown keys are rejected. A sha256 of the canonical
serialization identifies a run and is stamped into every artifact.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .condition import ConditionConfig
from .detector import DetectorConfig
from .pipeline import RUN_MODES, LinkParams
from .synthdata import GenConfig
from .training import TrainSchedule


class ConfigError(ValueError):
    """Unparseable or unknown configuration input."""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    mode: str = "two_in_one"
    condition: ConditionConfig = field(default_factory=ConditionConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    link: LinkParams = field(default_factory=LinkParams)
    data_dir: str = "data"
    out_dir: str = "out"

    def __post_init__(self):
        if self.mode not in RUN_MODES:
            raise ConfigError(f"unknown mode {self.mode!r} (expected one of {RUN_MODES})")


_SECTIONS = {
    "condition": ConditionConfig,
    "detector": DetectorConfig,
    "gen": GenConfig,
    "schedule": TrainSchedule,
    "link": LinkParams,
}
_TOP_LEVEL = ("seed", "mode", "data_dir", "out_dir")


def _format_value(value: Any) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(text: str, kind: Any) -> Any:
    origin = getattr(kind, "__origin__", None)
    if origin is tuple:
        args = kind.__args__
        item = args[0]
        if not text.strip():
            return ()
        return tuple(_parse_value(v, item) for v in text.split(","))
    if kind is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def _field_types(cls) -> dict[str, Any]:
    import typing
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def to_text(cfg: RunConfig) -> str:
    """Canonical serialization: sorted keys within sorted sections."""
    lines = [f"{key}={_format_value(getattr(cfg, key))}" for key in _TOP_LEVEL]
    for section in sorted(_SECTIONS):
        sub = getattr(cfg, section)
        for f in sorted(fields(sub), key=lambda f: f.name):
            lines.append(f"{section}.{f.name}={_format_value(getattr(sub, f.name))}")
    return "\n".join(lines) + "\n"


def from_text(text: str) -> RunConfig:
    """Parse key=value lines; every key optional, unknown keys rejected."""
    top: dict[str, Any] = {}
    sections: dict[str, dict[str, Any]] = {name: {} for name in _SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if "." in key:
            section, _, name = key.partition(".")
            if section not in _SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section {section!r}")
            types = _field_types(_SECTIONS[section])
            if name not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            try:
                sections[section][name] = _parse_value(value, types[name])
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
        else:
            if key not in _TOP_LEVEL:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            types = _field_types(RunConfig)
            try:
                top[key] = _parse_value(value, types[key])
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    try:
        return RunConfig(**top, **{name: cls(**sections[name])
                                   for name, cls in _SECTIONS.items()})
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> RunConfig:
    return from_text(Path(path).read_text(encoding="utf-8"))


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(to_text(cfg), encoding="utf-8")


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(to_text(cfg).encode("utf-8")).hexdigest()[:16]


def with_overrides(cfg: RunConfig, seed: int | None = None,
                   out_dir: str | None = None) -> RunConfig:
    updates: dict[str, Any] = {}
    if seed is not None:
        updates["seed"] = seed
    if out_dir is not None:
        updates["out_dir"] = out_dir
    return replace(cfg, **updates) if updates else cfg
