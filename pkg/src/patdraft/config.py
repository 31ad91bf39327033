"""Pipeline configuration: TOML file, then command-line flags, then env secrets."""

from __future__ import annotations

import copy
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .gateway import MODES, TAGS
from .generator import GeneratorConfig
from .graph import Category, SectionId
from .merge import MergeConfig
from .planner import DEFAULT_SECTION_MAP, PlannerConfig

STAGES = ("induce", "merge", "plan", "generate")


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, dict[str, Any]] = {
    "gateway": {"mode": "replay", "temperature": 0.2, "top_k": 10, "max_retries": 3, "overrides": {}},
    "induction": {"char_budget": 48_000},
    "merge": {"dedup_similarity_threshold": 0.8, "backend": "algorithmic"},
    "planner": {
        "k": 5,
        "tau_c": 0.5,
        "tau_s": 0.6,
        "category_section_map": {c.value: s.value for c, s in DEFAULT_SECTION_MAP.items()},
    },
    "generator": {
        "threshold_entail": 0.7,
        "threshold_cover": 0.8,
        "max_attempts": 3,
        "concurrent_sections": False,
        "max_examples": 2,
    },
    "paths": {"input": "", "output_dir": "out", "cache_dir": "cache", "few_shot_dir": ""},
    "stages": {"stop_after": "generate"},
}


@dataclass(frozen=True)
class PipelineConfig:
    settings: dict[str, dict[str, Any]]

    @property
    def gateway(self) -> dict[str, Any]:
        return self.settings["gateway"]

    @property
    def char_budget(self) -> int:
        return int(self.settings["induction"]["char_budget"])

    @property
    def merge(self) -> MergeConfig:
        return MergeConfig(**self.settings["merge"])

    @property
    def planner(self) -> PlannerConfig:
        p = self.settings["planner"]
        mapping = {Category.parse(c): SectionId.parse(s) for c, s in p["category_section_map"].items()}
        return PlannerConfig(k=int(p["k"]), tau_c=float(p["tau_c"]), tau_s=float(p["tau_s"]), category_section_map=mapping)

    @property
    def generator(self) -> GeneratorConfig:
        g = self.settings["generator"]
        return GeneratorConfig(
            threshold_entail=float(g["threshold_entail"]),
            threshold_cover=float(g["threshold_cover"]),
            max_attempts=int(g["max_attempts"]),
            concurrent_sections=bool(g["concurrent_sections"]),
        )

    @property
    def paths(self) -> dict[str, str]:
        return self.settings["paths"]

    @property
    def stop_after(self) -> str:
        return self.settings["stages"]["stop_after"]

    def snapshot(self) -> dict[str, Any]:
        return copy.deepcopy(self.settings)


def _merge_section(name: str, base: dict[str, Any], given: Mapping[str, Any]) -> None:
    for key, value in given.items():
        if key not in base:
            raise ConfigError(f"unknown config key {name}.{key}")
        if key == "overrides":
            if not isinstance(value, Mapping):
                raise ConfigError("gateway.overrides must be a table")
            for tag, params in value.items():
                if tag not in TAGS:
                    raise ConfigError(f"unknown gateway override tag {tag!r}")
                if not isinstance(params, Mapping) or set(params) - {"temperature", "top_k"}:
                    raise ConfigError(f"gateway.overrides.{tag} accepts only temperature and top_k")
            base[key] = {t: dict(p) for t, p in value.items()}
        elif key == "category_section_map":
            if not isinstance(value, Mapping):
                raise ConfigError("planner.category_section_map must be a table")
            base[key] = {**base[key], **value}
        else:
            base[key] = value


def build_config(data: Mapping[str, Any] | None = None, flags: Mapping[str, Any] | None = None) -> PipelineConfig:
    """Layer file data and flag overrides (``"section.key": value``) onto defaults and validate."""
    settings = copy.deepcopy(DEFAULTS)
    for section, values in (data or {}).items():
        if section not in settings:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, Mapping):
            raise ConfigError(f"config section {section!r} must be a table")
        _merge_section(section, settings[section], values)
    for dotted, value in (flags or {}).items():
        if value is None:
            continue
        section, key = dotted.split(".", 1)
        _merge_section(section, settings[section], {key: value})
    config = PipelineConfig(settings)
    _check(config)
    return config


def _check(config: PipelineConfig) -> None:
    g = config.gateway
    if g["mode"] not in MODES:
        raise ConfigError(f"gateway.mode must be one of {MODES}, got {g['mode']!r}")
    if not 0.0 <= float(g["temperature"]) <= 1.0:
        raise ConfigError(f"gateway.temperature {g['temperature']} outside [0, 1]")
    if int(g["top_k"]) < 1 or int(g["max_retries"]) < 1:
        raise ConfigError("gateway.top_k and gateway.max_retries must be positive")
    for tag, params in g["overrides"].items():
        if "temperature" in params and not 0.0 <= float(params["temperature"]) <= 1.0:
            raise ConfigError(f"gateway.overrides.{tag}.temperature outside [0, 1]")
        if "top_k" in params and int(params["top_k"]) < 1:
            raise ConfigError(f"gateway.overrides.{tag}.top_k must be positive")
    if config.char_budget < 1:
        raise ConfigError("induction.char_budget must be positive")
    if int(config.settings["generator"]["max_examples"]) < 0:
        raise ConfigError("generator.max_examples must be >= 0")
    if config.stop_after not in STAGES:
        raise ConfigError(f"stages.stop_after must be one of {STAGES}")
    try:
        config.merge
        config.planner
        config.generator
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None = None, flags: Mapping[str, Any] | None = None) -> PipelineConfig:
    data: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid config {path}: {exc}") from exc
    return build_config(data, flags)
