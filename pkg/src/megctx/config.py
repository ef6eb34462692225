"""Run configuration: one JSON document with fixed sections, plus dotted-key
overrides so command-line flags can patch individual values.

Sections: data, signal, codec, model, pretrain, finetune, analysis.  Unknown
sections or keys are rejected outright; a silently ignored typo in a config
file costs hours of compute.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .decode import FinetuneConfig
from .model import BackboneConfig
from .pretrain import PretrainConfig
from .rvq import RvqTrainConfig
from .signal import SignalConfig


@dataclass
class DataConfig:
    dir: str = ""
    vocab_k: int = 0            # 0: use the dataset vocabulary as-is
    data_fraction: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.data_fraction <= 1.0:
            raise ValueError("data_fraction must be in (0, 1]")
        if self.vocab_k < 0:
            raise ValueError("vocab_k must be nonnegative")


@dataclass
class AnalysisConfig:
    segments: int = 100
    seeds: int = 5

    def __post_init__(self):
        if self.segments < 1 or self.seeds < 1:
            raise ValueError("segments and seeds must be positive")


_SECTIONS = {
    "data": DataConfig,
    "signal": SignalConfig,
    "codec": RvqTrainConfig,
    "model": BackboneConfig,
    "pretrain": PretrainConfig,
    "finetune": FinetuneConfig,
    "analysis": AnalysisConfig,
}


@dataclass
class RunConfig:
    data: DataConfig
    signal: SignalConfig
    codec: RvqTrainConfig
    model: BackboneConfig
    pretrain: PretrainConfig
    finetune: FinetuneConfig
    analysis: AnalysisConfig

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name))
                for name in _SECTIONS}


def default_config() -> RunConfig:
    return RunConfig(**{name: cls() for name, cls in _SECTIONS.items()})


def _build_section(name: str, values: dict):
    cls = _SECTIONS[name]
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValueError(f"unknown key(s) in section '{name}': "
                         f"{', '.join(unknown)}")
    return cls(**values)


def config_from_dict(doc: dict) -> RunConfig:
    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ValueError(f"unknown config section(s): {', '.join(unknown)}")
    sections = {}
    for name, cls in _SECTIONS.items():
        values = doc.get(name, {})
        if not isinstance(values, dict):
            raise ValueError(f"section '{name}' must be an object")
        sections[name] = _build_section(name, values)
    return RunConfig(**sections)


def load_config(path=None) -> RunConfig:
    """Missing path: all defaults.  The file may specify any subset of
    sections and keys; everything else keeps its default."""
    if path is None:
        return default_config()
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config root must be an object")
    return config_from_dict(doc)


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
                          + "\n")


def _coerce(text: str, like):
    if isinstance(like, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"cannot parse boolean from {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """overrides: {'section.key': value}.  String values are coerced to the
    type of the default they replace; typed values pass through."""
    staged = {name: dataclasses.asdict(getattr(cfg, name))
              for name in _SECTIONS}
    for dotted, value in overrides.items():
        if "." not in dotted:
            raise ValueError(f"override key {dotted!r} must be section.key")
        section, key = dotted.split(".", 1)
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section '{section}'")
        if key not in staged[section]:
            raise ValueError(f"unknown key '{key}' in section '{section}'")
        current = staged[section][key]
        staged[section][key] = (_coerce(value, current)
                                if isinstance(value, str)
                                and not isinstance(current, str) else value)
    return config_from_dict(staged)
