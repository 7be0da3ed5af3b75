"""Layered run configuration: defaults < config file < command-line overrides.

The effective merged config is persisted into every run directory. Unknown
keys anywhere are rejected with field-level diagnostics rather than ignored.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .adaptation import AdaptationConfig
from .model import ModelConfig
from .scenes import GeneratorConfig
from .signal import MetricConfig
from .training import TrainingConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration; maps to CLI exit code 2."""


_SECTIONS = {
    "generator": GeneratorConfig,
    "model": ModelConfig,
    "training": TrainingConfig,
    "adaptation": AdaptationConfig,
    "metrics": MetricConfig,
}


@dataclass
class RunConfig:
    seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in _SECTIONS:
            out[name] = dataclasses.asdict(getattr(self, name))
        return out


def _build_section(cls, name: str, data: dict):
    valid = {f.name for f in fields(cls)}
    unknown = set(data) - valid
    if unknown:
        raise ConfigError(
            f"section {name!r}: unknown keys {sorted(unknown)}; valid keys: {sorted(valid)}"
        )
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


def load_run_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Build the effective config from a YAML file plus `section.key=value` overrides."""
    raw: dict = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config root must be a mapping")
        raw = loaded

    unknown = set(raw) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(
            f"unknown top-level keys {sorted(unknown)}; valid: {sorted(_SECTIONS) + ['seed']}"
        )
    sections = {name: dict(raw.get(name) or {}) for name in _SECTIONS}
    seed = raw.get("seed", 0)

    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, _, value_text = item.partition("=")
        value = yaml.safe_load(value_text)
        if key == "seed":
            seed = value
            continue
        if "." not in key:
            raise ConfigError(f"override key {key!r} must be section.key (or 'seed')")
        section, _, field_name = key.partition(".")
        if section not in _SECTIONS:
            raise ConfigError(f"override {key!r}: unknown section {section!r}")
        sections[section][field_name] = value

    if not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")

    built = {
        name: _build_section(cls, name, sections[name]) for name, cls in _SECTIONS.items()
    }
    return RunConfig(seed=seed, **built)


def save_run_config(cfg: RunConfig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
