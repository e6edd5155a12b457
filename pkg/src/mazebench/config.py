"""Layered run configuration: dataclass defaults, an INI-style file,
``MAZEBENCH_``-prefixed environment variables, then explicit flag
overrides — later layers win. Every knob coerces to the type of its
default and unknown names fail loudly, so typos cannot silently run a
different experiment. The canonical hash of a configuration is stamped
into checkpoints, manifests, and report headers.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from typing import Mapping, Optional

from .agent import AgentConfig
from .benchmark import BenchConfig
from .trainer import TrainConfig
from .world import EnvConfig

ENV_PREFIX = "MAZEBENCH_"

_TRUE_WORDS = frozenset({"true", "1", "yes", "on"})
_FALSE_WORDS = frozenset({"false", "0", "no", "off"})


class ConfigError(Exception):
    """Raised for unknown keys, malformed values, and failed validation."""


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig
    agent: AgentConfig
    train: TrainConfig
    bench: BenchConfig

    def validate(self) -> None:
        try:
            self.env.validate()
            self.agent.validate()
            self.train.validate()
            self.bench.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


_SECTIONS = {
    "env": EnvConfig,
    "agent": AgentConfig,
    "train": TrainConfig,
    "bench": BenchConfig,
}


def _coerce(section: str, key: str, raw, default) -> object:
    """Parse ``raw`` as the type of ``default``; strict about bools/ints."""
    where = f"{section}.{key}"
    if not isinstance(raw, str):
        # typed override: bool must be checked before int (bool is an int)
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
        elif isinstance(default, int):
            if isinstance(raw, int) and not isinstance(raw, bool):
                return raw
        elif isinstance(default, float):
            if isinstance(raw, (int, float)) and not isinstance(raw, bool):
                return float(raw)
        elif isinstance(raw, type(default)):
            return raw
        raise ConfigError(
            f"{where}: expected {type(default).__name__}, got {type(raw).__name__}"
        )
    text = raw.strip()
    if isinstance(default, bool):
        lowered = text.lower()
        if lowered in _TRUE_WORDS:
            return True
        if lowered in _FALSE_WORDS:
            return False
        raise ConfigError(f"{where}: {text!r} is not a boolean")
    if isinstance(default, int):
        try:
            return int(text, 10)
        except ValueError:
            raise ConfigError(f"{where}: {text!r} is not an integer") from None
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{where}: {text!r} is not a number") from None
    return text


def _apply(values: dict[str, dict], section: str, key: str, raw) -> None:
    if section not in _SECTIONS:
        raise ConfigError(
            f"unknown section {section!r} (expected one of {sorted(_SECTIONS)})"
        )
    defaults = _SECTIONS[section]()
    if not any(f.name == key for f in dataclasses.fields(defaults)):
        raise ConfigError(f"unknown key {key!r} in section {section!r}")
    values[section][key] = _coerce(section, key, raw, getattr(defaults, key))


def load_config(
    path=None,
    *,
    env_vars: Optional[Mapping[str, str]] = None,
    overrides: Optional[Mapping[str, object]] = None,
) -> RunConfig:
    """Assemble a validated RunConfig from all four layers.

    ``path`` names an INI-style file with [env]/[agent]/[train]/[bench]
    sections; ``env_vars`` (default: the process environment) supplies
    ``MAZEBENCH_<SECTION>__<KEY>`` overrides; ``overrides`` maps
    "section.key" to values from command-line flags.
    """
    values: dict[str, dict] = {name: {} for name in _SECTIONS}

    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as f:
                parser.read_file(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(values, section, key, raw)

    if env_vars is None:
        env_vars = os.environ
    for name in sorted(env_vars):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):]
        if "__" not in rest:
            raise ConfigError(
                f"environment variable {name} must look like "
                f"{ENV_PREFIX}SECTION__KEY"
            )
        section, key = rest.split("__", 1)
        _apply(values, section.lower(), key.lower(), env_vars[name])

    if overrides:
        for dotted in sorted(overrides):
            if "." not in dotted:
                raise ConfigError(f"override {dotted!r} must look like section.key")
            section, key = dotted.split(".", 1)
            _apply(values, section, key, overrides[dotted])

    try:
        config = RunConfig(
            env=EnvConfig(**values["env"]),
            agent=AgentConfig(**values["agent"]),
            train=TrainConfig(**values["train"]),
            bench=BenchConfig(**values["bench"]),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    config.validate()
    return config


def config_hash(config: RunConfig) -> str:
    """16-hex digest of the canonical JSON form; order-independent."""
    payload = {
        name: dataclasses.asdict(getattr(config, name)) for name in _SECTIONS
    }
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def dump_config(config: RunConfig) -> str:
    """INI text with every knob spelled out; reloads to an equal config."""
    lines = []
    for section in _SECTIONS:
        lines.append(f"[{section}]")
        block = getattr(config, section)
        for field in dataclasses.fields(block):
            lines.append(f"{field.name} = {getattr(block, field.name)}")
        lines.append("")
    return "\n".join(lines)
