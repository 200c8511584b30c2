"""Experiment configuration: a sectioned ``key = value`` text file that maps
onto the settings dataclasses used by the trainers."""

from __future__ import annotations

import ast
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .distill import DistillSettings
from .grpo_train import GRPOSettings
from .synth import DEFAULT_LABEL_MIX, WorldConfig


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentSettings:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    # data and world are shared by every training seed
    data_seed: int = 0
    world_seed: int = 0
    reason_seed: int = 0
    workers: int = 1


@dataclass
class DataSettings:
    n_train: int = 20000
    n_test: int = 2000
    label_mix: tuple[float, float, float] = DEFAULT_LABEL_MIX
    reason_mode: str = "oracle"
    # GRPO prompt pool and held-out prompts
    n_grpo_pool: int = 2000
    n_grpo_eval: int = 500


SECTIONS = {
    "experiment": ExperimentSettings,
    "world": WorldConfig,
    "data": DataSettings,
    "distill": DistillSettings,
    "grpo": GRPOSettings,
}


@dataclass
class ExperimentConfig:
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)
    world: WorldConfig = field(default_factory=WorldConfig)
    data: DataSettings = field(default_factory=DataSettings)
    distill: DistillSettings = field(default_factory=DistillSettings)
    grpo: GRPOSettings = field(default_factory=GRPOSettings)

    # -- file form ---------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for name in SECTIONS:
            if lines:
                lines.append("")
            lines.append(f"[{name}]")
            obj = getattr(self, name)
            for f in fields(obj):
                lines.append(f"{f.name} = {getattr(obj, f.name)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        values: dict[str, dict[str, Any]] = {name: {} for name in SECTIONS}
        section = None
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            where = f"{source}:{lineno}"
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                if section not in SECTIONS:
                    raise ConfigError(f"{where}: unknown section [{section}]")
                continue
            if "=" not in line:
                raise ConfigError(f"{where}: expected 'key = value'")
            if section is None:
                raise ConfigError(f"{where}: key outside any section")
            key, _, rhs = line.partition("=")
            key = key.strip()
            known = {f.name for f in fields(SECTIONS[section])}
            if key not in known:
                raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
            if key in values[section]:
                raise ConfigError(f"{where}: duplicate key {key!r}")
            try:
                values[section][key] = ast.literal_eval(rhs.strip())
            except (ValueError, SyntaxError) as exc:
                raise ConfigError(f"{where}: cannot parse value for {key!r}: {rhs.strip()}") from exc
        return cls.from_dict(values)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, str(path))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    # -- dict / JSON form --------------------------------------------------

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown sections {sorted(unknown)}")
        parts = {}
        for name, klass in SECTIONS.items():
            defaults = klass()
            kw = {}
            for key, value in d.get(name, {}).items():
                if not hasattr(defaults, key):
                    raise ConfigError(f"unknown key {key!r} in [{name}]")
                kw[key] = _coerce(name, key, value, getattr(defaults, key))
            try:
                parts[name] = replace(defaults, **kw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{name}]: {exc}") from exc
        cfg = cls(**parts)
        cfg.validate()
        return cfg

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def validate(self) -> None:
        e = self.experiment
        if not e.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(e.seeds)) != len(e.seeds):
            raise ConfigError(f"duplicate seeds in {e.seeds}")
        if e.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.data.n_train < 1 or self.data.n_test < 1:
            raise ConfigError("dataset sizes must be positive")
        if self.distill.steps < 1 or self.distill.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if self.distill.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.grpo.G < 2:
            raise ConfigError("GRPO group size must be >= 2")
        try:
            self.world.validate()
        except ValueError as exc:
            raise ConfigError(f"[world]: {exc}") from exc

    # -- convenience -------------------------------------------------------

    def with_overrides(self, section: str, **kw) -> "ExperimentConfig":
        d = self.to_dict()
        d[section].update(kw)
        return ExperimentConfig.from_dict(d)

    def paper_defaults(self) -> "ExperimentConfig":
        """Loss weights and group size as published: mu=0.1, gamma=delta=0.01, G=16."""
        d = self.to_dict()
        d["distill"].update(mu=0.1, gamma=0.01, delta=0.01)
        d["grpo"].update(G=16)
        return ExperimentConfig.from_dict(d)


def _coerce(section: str, key: str, value, default):
    where = f"[{section}] {key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a sequence, got {value!r}")
        inner = default[0] if default else None
        return tuple(_coerce(section, key, v, inner) if inner is not None else v for v in value)
    if isinstance(default, int) and not isinstance(value, bool) and isinstance(value, int):
        return value
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if default is None or isinstance(value, type(default)):
        return value
    raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")


def parse_seed_range(text: str) -> tuple[int, ...]:
    """``"3"`` -> (3,), ``"0..4"`` -> (0, 1, 2, 3, 4)."""
    try:
        if ".." in text:
            lo, hi = (int(x) for x in text.split("..", 1))
            if hi < lo:
                raise ValueError
            return tuple(range(lo, hi + 1))
        return (int(text),)
    except ValueError:
        raise ConfigError(f"bad seed range {text!r}; expected N or N..M") from None
