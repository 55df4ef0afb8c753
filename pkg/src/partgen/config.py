"""Run configuration: an INI file with one section per command family.

Precedence, lowest to highest: built-in defaults, the config file, command
line flags. Keys of the [generator] and [blender] sections are matched
against both the network and the training config fields, plus ``preset``
(full, desk or micro) which picks the network size before overrides.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import asdict, fields
from pathlib import Path

from .blending import BlenderConfig, BlenderTrainConfig
from .dataset import CATEGORIES
from .generator import GeneratorConfig
from .training import GeneratorTrainConfig

OUTPUT_ROOT_ENV = "PARTGEN_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "partgen-runs"

PRESETS = {
    "generator": {
        "full": {},
        "desk": asdict(GeneratorConfig.desk()),
        "micro": asdict(GeneratorConfig.micro()),
    },
    "blender": {
        "full": {},
        "desk": {"layers": 2, "mlp_dim": 256, "resolution": 64},
        "micro": asdict(BlenderConfig.micro()),
    },
}

_SECTION_DEFAULTS = {
    "global": {"seed": 0},
    "dataset": {"categories": ",".join(CATEGORIES), "train": 2000, "val": 200, "test": 200,
                "n_clusters": 20, "max_parts": 24},
    "generator": {"preset": "full", "condition": False},
    "blender": {"preset": "full"},
    "sampling": {"count": 10, "max_parts": 50, "temperature": 1.0},
    "evaluation": {"n_points": 2048, "workers": 1},
}

_TYPED = {
    "generator": (GeneratorConfig, GeneratorTrainConfig),
    "blender": (BlenderConfig, BlenderTrainConfig),
}


class ConfigError(ValueError):
    pass


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or DEFAULT_OUTPUT_ROOT)


def _coerce(value, like, key):
    if not isinstance(value, str):
        return value
    try:
        if isinstance(like, bool):
            v = value.strip().lower()
            if v not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(value)
            return v in ("1", "true", "yes", "on")
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
        if isinstance(like, tuple):
            return tuple(float(x) for x in value.split(","))
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    return value.strip()


def _field_defaults(section: str) -> dict:
    out = dict(_SECTION_DEFAULTS.get(section, {}))
    for cls in _TYPED.get(section, ()):
        for f in fields(cls):
            if f.name != "seed":  # the run seed lives in [global]
                out.setdefault(f.name, getattr(cls(), f.name))
    return out


class RunConfig:
    """Typed view of the sections; ``get(section)`` returns a plain dict."""

    def __init__(self, sections: dict | None = None):
        self._s = {name: {} for name in _SECTION_DEFAULTS}
        for name, values in (sections or {}).items():
            self.update(name, values)

    @classmethod
    def load(cls, path=None) -> "RunConfig":
        cfg = cls()
        if path is None:
            return cfg
        if not Path(path).is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        parser.read(path, encoding="utf-8")
        for name in parser.sections():
            cfg.update(name, dict(parser[name]))
        return cfg

    def update(self, section: str, values: dict) -> None:
        if section not in self._s:
            raise ConfigError(f"unknown config section [{section}]")
        known = _field_defaults(section)
        for k, v in values.items():
            if v is None:
                continue
            if k not in known:
                raise ConfigError(f"unknown key {k!r} in [{section}]")
            self._s[section][k] = _coerce(v, known[k], f"[{section}] {k}")

    def get(self, section: str) -> dict:
        return {**_field_defaults(section), **self._s[section]}

    @property
    def seed(self) -> int:
        return int(self.get("global")["seed"])

    def categories(self) -> list:
        cats = [c.strip() for c in str(self.get("dataset")["categories"]).split(",") if c.strip()]
        bad = [c for c in cats if c not in CATEGORIES]
        if bad or not cats:
            raise ConfigError(f"unknown category {bad[0] if bad else '(none)'!r}; choose from {', '.join(CATEGORIES)}")
        return cats

    def _network(self, section: str, cls):
        s = self.get(section)
        preset = s["preset"]
        if preset not in PRESETS[section]:
            raise ConfigError(f"unknown {section} preset {preset!r}")
        base = dict(PRESETS[section][preset])
        # only keys set explicitly in the file or on the command line override the preset
        base.update({k: v for k, v in self._s[section].items() if k in {f.name for f in fields(cls)}})
        return cls(**base)

    def generator_config(self, condition_dim: int = 0) -> GeneratorConfig:
        cfg = self._network("generator", GeneratorConfig)
        if condition_dim:
            cfg.condition_dim = condition_dim
        return cfg

    def generator_train_config(self) -> GeneratorTrainConfig:
        s = self.get("generator")
        return GeneratorTrainConfig(**{f.name: s[f.name] for f in fields(GeneratorTrainConfig) if f.name != "seed"},
                                    seed=self.seed)

    def blender_config(self) -> BlenderConfig:
        return self._network("blender", BlenderConfig)

    def blender_train_config(self) -> BlenderTrainConfig:
        s = self.get("blender")
        return BlenderTrainConfig(**{f.name: s[f.name] for f in fields(BlenderTrainConfig) if f.name != "seed"},
                                  seed=self.seed)

    def to_text(self) -> str:
        """Effective configuration as INI text."""
        parser = configparser.ConfigParser()
        for name in self._s:
            parser[name] = {k: (",".join(map(str, v)) if isinstance(v, tuple) else str(v))
                            for k, v in sorted(self.get(name).items())}
        lines = []
        for name in parser.sections():
            lines.append(f"[{name}]")
            lines += [f"{k} = {v}" for k, v in parser[name].items()]
            lines.append("")
        return "\n".join(lines)
