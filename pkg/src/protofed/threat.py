"""Data-poisoning adversaries: feature noise, label flips, their alternation,
and prototype amplification."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import AttackUndefinedError
from .prototypes import LocalDataset, Prototype

log = logging.getLogger(__name__)

KINDS = ("none", "feature", "label", "dynamic", "amplify")


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    fraction: float = 0.0
    amplify_factor: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("attack fraction must lie in [0, 1]")
        if self.kind == "amplify" and self.amplify_factor <= 1.0:
            raise ValueError("amplify factor must exceed 1")
        if self.fraction >= 0.5:
            log.warning("malicious fraction %.2f is not a minority", self.fraction)


def select_malicious(clients: Sequence[int], fraction: float, rng: np.random.Generator) -> set[int]:
    """floor(fraction * |clients|) clients chosen uniformly without replacement."""
    count = math.floor(fraction * len(clients) + 1e-9)
    if count == 0:
        return set()
    return {int(c) for c in rng.choice(np.asarray(sorted(clients)), size=count, replace=False)}


def poison_features(data: LocalDataset, rng: np.random.Generator) -> LocalDataset:
    """Replace every feature with a uniform draw over the data's per-dimension range."""
    if len(data) == 0:
        return data
    lo, hi = data.features.min(axis=0), data.features.max(axis=0)
    return LocalDataset(rng.uniform(lo, hi, data.features.shape), data.labels.copy())


def poison_labels(data: LocalDataset, classes: Iterable[int], rng: np.random.Generator) -> LocalDataset:
    """Move every label to a uniformly chosen different class."""
    classes = np.asarray(sorted(set(int(c) for c in classes)))
    if classes.size < 2:
        raise AttackUndefinedError("label flipping needs at least two classes")
    pos = np.searchsorted(classes, data.labels)
    if np.any(pos >= classes.size) or np.any(classes[np.minimum(pos, classes.size - 1)] != data.labels):
        raise ValueError("dataset contains labels outside the class universe")
    # offset in 1..C-1 guarantees a different class, uniformly over the rest
    offset = rng.integers(1, classes.size, size=len(data))
    return LocalDataset(data.features.copy(), classes[(pos + offset) % classes.size])


def dynamic_behavior(t: int, spec: AttackSpec | None = None) -> str:
    """Alternating attack: feature on odd rounds, label on even rounds."""
    if spec is not None and spec.kind != "dynamic":
        raise ValueError("dynamic_behavior applies to dynamic attacks only")
    return "feature" if t % 2 == 1 else "label"


def amplify_prototypes(protos: Iterable[Prototype], factor: float) -> list[Prototype]:
    if factor <= 1.0:
        raise ValueError("amplify factor must exceed 1")
    return [replace(p, vector=p.vector * factor) for p in protos]
