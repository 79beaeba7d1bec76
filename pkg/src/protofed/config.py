"""Experiment configuration: a dataclass tree loaded from TOML with dotted overrides."""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError
from .threat import KINDS

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "none"
    fraction: float = 0.0
    amplify_factor: float = 5.0


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "blobs"  # "blobs" or "idx"
    n_classes: int = 10
    dim: int = 32
    samples_per_class: int = 200
    radius: float = 5.0
    sigma: float = 1.0
    images: str = ""
    labels: str = ""
    max_n: int = 2000


@dataclass(frozen=True)
class ExperimentConfig:
    n_clients: int = 20
    rounds: int = 30
    local_iters: int = 5
    batch_size: int = 64
    eta: float = 0.05
    lam: float = 1.0
    chi: float = 0.0
    d: int = 29
    avg: float = 3.0
    std: float = 2.0
    proto_dim: int = 16
    hidden: int = 64
    test_fraction: float = 0.2
    zero_min_policy: str = "literal"
    he_backend: str = "simulated"
    norm_tolerance: float = 1e-5
    seed: int = 0
    he_seed: int = 1
    attack: AttackConfig = field(default_factory=AttackConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)

    def validate(self) -> "ExperimentConfig":
        problems = []
        if self.rounds < 1 or self.local_iters < 1:
            problems.append("rounds and local_iters must be >= 1")
        if self.n_clients < 1:
            problems.append("n_clients must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not 1 <= self.avg <= self.dataset.n_classes:
            problems.append(f"avg must lie in [1, {self.dataset.n_classes}]")
        if self.std < 0:
            problems.append("std must be >= 0")
        if self.eta < 0 or self.lam < 0:
            problems.append("eta and lam must be >= 0")
        if not -1 <= self.chi < 1:
            problems.append("chi must lie in [-1, 1)")
        if self.d < 1:
            problems.append("d must be >= 1")
        if self.zero_min_policy not in ("literal", "only_if_below_threshold"):
            problems.append(f"unknown zero_min_policy {self.zero_min_policy!r}")
        if self.he_backend != "simulated":
            problems.append(f"unsupported he_backend {self.he_backend!r}")
        if self.attack.kind not in KINDS:
            problems.append(f"unknown attack kind {self.attack.kind!r}")
        if not 0 <= self.attack.fraction <= 1:
            problems.append("attack.fraction must lie in [0, 1]")
        if self.attack.kind == "amplify" and self.attack.amplify_factor <= 1:
            problems.append("attack.amplify_factor must exceed 1")
        if self.dataset.kind not in ("blobs", "idx"):
            problems.append(f"unknown dataset kind {self.dataset.kind!r}")
        if not 0 <= self.test_fraction < 1:
            problems.append("test_fraction must lie in [0, 1)")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


_SECTIONS = {"attack": AttackConfig, "dataset": DatasetConfig}


def _coerce(value: Any, current: Any, key: str) -> Any:
    if isinstance(current, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return bool(value)
    try:
        if isinstance(current, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(current, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {type(current).__name__}") from None
    return str(value)


def from_dict(data: Mapping[str, Any], base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Build a config from nested or dotted keys, starting from ``base``."""
    flat: dict[str, Any] = {}
    for key, value in data.items():
        if isinstance(value, Mapping):
            for sub, v in value.items():
                flat[f"{key}.{sub}"] = v
        else:
            flat[key] = value
    return apply_overrides(base or ExperimentConfig(), flat)


def apply_overrides(cfg: ExperimentConfig, overrides: Mapping[str, Any]) -> ExperimentConfig:
    top: dict[str, Any] = {}
    nested: dict[str, dict[str, Any]] = {}
    for key, value in overrides.items():
        section, _, name = key.rpartition(".")
        if section:
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section {section!r}")
            current = getattr(cfg, section)
            if name not in {f.name for f in dataclasses.fields(current)}:
                raise ConfigError(f"unknown config key {key!r}")
            nested.setdefault(section, {})[name] = _coerce(value, getattr(current, name), key)
        else:
            if name not in {f.name for f in dataclasses.fields(cfg)} or name in _SECTIONS:
                raise ConfigError(f"unknown config key {key!r}")
            top[name] = _coerce(value, getattr(cfg, name), key)
    for section, values in nested.items():
        top[section] = dataclasses.replace(getattr(cfg, section), **values)
    return dataclasses.replace(cfg, **top).validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    """TOML text that :func:`load_config` reads back to an equal config."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        return repr(v)

    lines = []
    data = cfg.to_dict()
    for k, v in data.items():
        if not isinstance(v, dict):
            lines.append(f"{k} = {fmt(v)}")
    for section in _SECTIONS:
        lines.append(f"\n[{section}]")
        lines.extend(f"{k} = {fmt(v)}" for k, v in data[section].items())
    return "\n".join(lines) + "\n"
