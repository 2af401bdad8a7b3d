"""Flat ``key = value`` config files with cosmetic ``[section]`` headers.

Every key names a :class:`~stablespike.trainer.TrainConfig` field; sections
only group keys for readability.  Unknown keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from pathlib import Path

from .trainer import TrainConfig

SECTIONS = {
    "model": ("arch", "hidden", "timesteps", "input_size", "classes", "tau", "theta",
              "surrogate_width", "detach_reset", "init_gain"),
    "method": ("beta", "gamma", "alpha", "consistency_fn", "noise", "bitop", "dense",
               "detach_anchor", "detach_clean", "detach_noise_rate"),
    "optim": ("lr", "momentum", "weight_decay", "decay_every", "decay_factor", "epochs",
              "batch_size"),
    "run": ("seed", "data_dir", "e_ac", "e_mac"),
}


class ConfigError(ValueError):
    """Unknown key or unparsable value."""


def _field_types() -> dict[str, type]:
    hints = typing.get_type_hints(TrainConfig)
    return {f.name: hints[f.name] for f in dataclasses.fields(TrainConfig)}


def parse_value(key: str, text: str):
    types = _field_types()
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    kind = types[key]
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        # tuple[int, ...]
        return tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    text = path.read_text()
    if not text.lstrip().startswith("["):
        text = "[run]\n" + text
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    values = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            values[key] = parse_value(key, raw)
    return values


def parse_overrides(pairs) -> dict:
    values = {}
    for pair in pairs or ():
        key, sep, raw = pair.partition("=")
        if not sep:
            raise ConfigError(f"override must be key=value, got {pair!r}")
        values[key.strip()] = parse_value(key.strip(), raw)
    return values


def resolve(path=None, overrides=(), base: TrainConfig | None = None) -> TrainConfig:
    values = dict(dataclasses.asdict(base or TrainConfig()))
    if path is not None:
        values.update(read_config_file(path))
    values.update(parse_overrides(overrides))
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def dump(cfg: TrainConfig) -> str:
    d = cfg.to_dict()
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {format_value(d[k])}" for k in keys)
        lines.append("")
    return "\n".join(lines)
