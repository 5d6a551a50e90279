"""Run configuration: a TOML file with one table per section, plus ``key=value`` overrides."""
from __future__ import annotations

import copy
import dataclasses
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .adaptation import DescriptorConfig, TrainConfig
from .backbone import BackboneSpec, PreprocessConfig
from .errors import ConfigError
from .soft_topk import SoftTopKConfig


@dataclass(frozen=True)
class EvalConfig:
    batch_size: int = 8


@dataclass(frozen=True)
class PathsConfig:
    data: str = ""
    out: str = "runs/adfa"


_SECTIONS = {
    "backbone": BackboneSpec,
    "preprocess": PreprocessConfig,
    "descriptor": DescriptorConfig,
    "soft_topk": SoftTopKConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "paths": PathsConfig,
}

# Sections that describe where things live rather than what is computed;
# they stay out of artifact echoes so relocating a run does not change hashes.
_LOCATION_SECTIONS = ("paths",)


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    descriptor: DescriptorConfig = field(default_factory=DescriptorConfig)
    soft_topk: SoftTopKConfig = field(default_factory=SoftTopKConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = set(data) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        kwargs = {}
        for name, klass in _SECTIONS.items():
            section = data.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"config section [{name}] must be a table")
            known = {f.name: f for f in fields(klass)}
            bad = set(section) - set(known)
            if bad:
                raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(bad))}")
            values = {}
            for key, value in section.items():
                default = known[key].default
                if isinstance(default, tuple) and isinstance(value, list):
                    value = tuple(value)
                elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
                    value = float(value)
                elif default is not dataclasses.MISSING and not isinstance(value, type(default)):
                    raise ConfigError(
                        f"[{name}].{key} expects {type(default).__name__}, got {type(value).__name__}"
                    )
                values[key] = value
            try:
                kwargs[name] = klass(**values)
            except TypeError as exc:
                raise ConfigError(f"bad [{name}] section: {exc}") from exc
        return cls(**kwargs)

    def to_dict(self) -> dict:
        out = {}
        for name in _SECTIONS:
            section = dataclasses.asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    def echo(self) -> dict:
        """Config as embedded in artifacts."""
        return {k: v for k, v in self.to_dict().items() if k not in _LOCATION_SECTIONS}

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings (values parsed as TOML, else kept as strings)."""
    data = copy.deepcopy(data)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, raw = item.split("=", 1)
        section, key = dotted.strip().split(".", 1)
        data.setdefault(section, {})[key] = _parse_value(raw.strip())
    return data


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    data = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return RunConfig.from_dict(apply_overrides(data, overrides or []))
