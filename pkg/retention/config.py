"""Experiment configuration: nested dataclass sections, JSON files and ``section.key=value`` overrides."""
from __future__ import annotations

import enum
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Union

from retention.baselines import CemConfig, Td3Config
from retention.core import ConfigError
from retention.rlur import RlurHyper, TrainerConfig
from retention.simenv import SimConfig

logger = logging.getLogger("retention.config")


class Algorithm(str, enum.Enum):
    CEM = "CEM"
    TD3 = "TD3"
    RLUR_NAIVE_G0 = "RLUR_NAIVE_G0"
    RLUR_NAIVE_G09 = "RLUR_NAIVE_G09"
    RLUR = "RLUR"


SECTIONS = {
    "sim": SimConfig,
    "rlur": RlurHyper,
    "trainer": TrainerConfig,
    "cem": CemConfig,
    "td3": Td3Config,
}
TOP_LEVEL = ("algorithm", "seed", "episodes", "window", "output_dir", "workers")


@dataclass
class ExperimentConfig:
    algorithm: Algorithm = Algorithm.RLUR
    seed: int = 0
    episodes: int = 40
    window: int = 10
    # None places the run under RETENTION_OUTPUT_ROOT
    output_dir: Optional[str] = None
    workers: int = 4
    sim: SimConfig = field(default_factory=SimConfig)
    rlur: RlurHyper = field(default_factory=RlurHyper)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    cem: CemConfig = field(default_factory=CemConfig)
    td3: Td3Config = field(default_factory=Td3Config)

    def validate(self) -> "ExperimentConfig":
        self.algorithm = Algorithm(self.algorithm)
        if self.episodes < 1:
            raise ConfigError(f"episodes must be >= 1, got {self.episodes}")
        if not 1 <= self.window <= self.episodes:
            raise ConfigError(f"window must lie in [1, episodes={self.episodes}], got {self.window}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        for name in SECTIONS:
            getattr(self, name).validate()
        if self.algorithm is Algorithm.CEM and self.cem.eval_users > self.sim.population:
            raise ConfigError(
                f"cem.eval_users ({self.cem.eval_users}) exceeds the population ({self.sim.population})"
            )
        return self

    @property
    def run_name(self) -> str:
        return f"{self.algorithm.value}_seed{self.seed}"

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["algorithm"] = Algorithm(self.algorithm).value
        return out

    def digest(self) -> str:
        """Short content hash of the resolved config."""
        payload = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:12]


def _section_from(cls, values: Mapping[str, Any], section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    kwargs = dict(values)
    for f in fields(cls):
        # JSON has no tuples
        if f.name in kwargs and isinstance(kwargs[f.name], list):
            kwargs[f.name] = tuple(kwargs[f.name])
    return replace(cls(), **kwargs)


def from_dict(data: Mapping[str, Any], base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Merge a nested mapping onto `base` (defaults when omitted)."""
    config = base if base is not None else ExperimentConfig()
    unknown = set(data) - set(TOP_LEVEL) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level config keys {sorted(unknown)}")

    updates: Dict[str, Any] = {k: data[k] for k in TOP_LEVEL if k in data}
    if "algorithm" in updates:
        try:
            updates["algorithm"] = Algorithm(updates["algorithm"])
        except ValueError as exc:
            choices = [a.value for a in Algorithm]
            raise ConfigError(f"unknown algorithm {updates['algorithm']!r}, expected one of {choices}") from exc
    for name, cls in SECTIONS.items():
        if name in data:
            if not isinstance(data[name], Mapping):
                raise ConfigError(f"config section [{name}] must be an object")
            merged = {**asdict(getattr(config, name)), **data[name]}
            updates[name] = _section_from(cls, merged, name)
    try:
        return replace(config, **updates)
    except TypeError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc


def load_json(path: Union[str, Path], base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    logger.debug("loaded config file %s", path)
    return from_dict(data, base)


def parse_override(text: str) -> Dict[str, Any]:
    """``section.key=value`` (or ``key=value`` for top-level keys) as a nested dict; values are JSON."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    dotted, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        # bare words are strings
        value = raw
    parts = dotted.strip().split(".")
    if len(parts) == 1:
        return {parts[0]: value}
    if len(parts) == 2:
        return {parts[0]: {parts[1]: value}}
    raise ConfigError(f"override key {dotted!r} nests deeper than section.key")


def apply_overrides(config: ExperimentConfig, overrides: Iterable[str]) -> ExperimentConfig:
    for text in overrides:
        config = from_dict(parse_override(text), config)
    return config


def save_json(config: ExperimentConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
