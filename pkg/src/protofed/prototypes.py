"""Client-side prototype learning: per-class feature means, the cosine
regularised objective, local SGD and normalised prototype submission."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import nn
from .errors import DegenerateVectorError, ShapeError
from .nn import ModelParams

log = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class LocalDataset:
    features: np.ndarray  # (n, dim)
    labels: np.ndarray  # (n,) int

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim == 1 and feats.size == 0:
            feats = feats.reshape(0, 0)
        if feats.ndim != 2 or labels.shape != (feats.shape[0],):
            raise ShapeError(f"features {feats.shape} and labels {labels.shape} disagree")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def classes(self) -> list[int]:
        return sorted(int(k) for k in np.unique(self.labels))

    @property
    def class_index(self) -> dict[int, np.ndarray]:
        return {k: np.flatnonzero(self.labels == k) for k in self.classes}

    def subset(self, idx) -> "LocalDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LocalDataset(self.features[idx], self.labels[idx])


@dataclass(frozen=True)
class Prototype:
    class_id: int
    vector: np.ndarray
    round: int = 0
    owner: int = -1
    normalized: bool = False


@dataclass
class GlobalPrototypeSet:
    round: int = 0
    by_class: dict[int, np.ndarray] = field(default_factory=dict)

    def __contains__(self, k):
        return k in self.by_class

    def __len__(self):
        return len(self.by_class)


def compute_prototypes(params: ModelParams, data: LocalDataset, classes: Iterable[int] | None = None,
                       round: int = 0, owner: int = -1) -> list[Prototype]:
    """Mean extracted feature per class; classes without samples are omitted."""
    if len(data) == 0:
        return []
    feats = nn.forward_extract(params, data.features)
    wanted = set(data.classes) if classes is None else set(classes) & set(data.classes)
    index = data.class_index
    return [Prototype(k, feats[index[k]].mean(axis=0), round, owner) for k in sorted(wanted)]


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < DEGENERATE_NORM or nb < DEGENERATE_NORM:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    return float(np.dot(a, b) / (na * nb))


def auxiliary_loss(local: Iterable[Prototype], global_set: GlobalPrototypeSet, n_classes: int) -> float:
    """(1/|I|) * sum over held classes of (1 - cos(local, global)).

    Classes the client does not hold contribute nothing, but the divisor stays
    the full class count, so the value lies in [0, 2].
    """
    acc = 0.0
    for p in local:
        if p.class_id not in global_set:
            raise KeyError(f"no global prototype for class {p.class_id}")
        acc += 1.0 - cosine(p.vector, global_set.by_class[p.class_id])
    return acc / n_classes


def _traced_loss(trace: nn.Trace, batch: LocalDataset, global_set: GlobalPrototypeSet | None,
                 lam: float, n_classes: int) -> nn.Var:
    u = trace.extract(batch.features)
    loss = nn.cross_entropy(trace.classify(u), batch.labels)
    if lam == 0 or not global_set:
        return loss
    # classes missing from the batch or from the global set are skipped
    held = [k for k in batch.classes if k in global_set]
    if not held:
        return loss
    labels = batch.labels
    avg = np.zeros((len(held), len(batch)))
    for row, k in enumerate(held):
        mask = labels == k
        avg[row, mask] = 1.0 / mask.sum()
    protos = nn.matmul(avg, u)  # (K, d) batch prototypes
    targets = np.stack([global_set.by_class[k] for k in held])
    pn = nn.norm_rows(protos)
    tn = np.linalg.norm(targets, axis=1)
    if np.any(pn.value < DEGENERATE_NORM) or np.any(tn < DEGENERATE_NORM):
        raise DegenerateVectorError("zero-norm prototype in auxiliary term")
    sims = nn.div(nn.dot_rows(protos, targets), nn.mul(pn, tn))
    aux = nn.mul(nn.total(nn.sub(1.0, sims)), 1.0 / n_classes)
    return nn.add(loss, nn.mul(aux, lam))


def total_loss(params: ModelParams, batch: LocalDataset, global_set: GlobalPrototypeSet | None,
               lam: float, n_classes: int) -> float:
    """Mean cross-entropy plus ``lam`` times the auxiliary term on batch prototypes."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if len(batch) == 0:
        raise ValueError("empty batch")
    return float(_traced_loss(nn.Trace(params), batch, global_set, lam, n_classes).value)


def loss_and_grad(params: ModelParams, batch: LocalDataset, global_set: GlobalPrototypeSet | None,
                  lam: float, n_classes: int) -> tuple[float, nn.GradientSet]:
    # global prototypes enter as constants: only the extractor/classifier are differentiated
    trace = nn.Trace(params)
    loss = _traced_loss(trace, batch, global_set, lam, n_classes)
    return float(loss.value), nn.backward(trace, loss)


def local_train(params: ModelParams, data: LocalDataset, global_set: GlobalPrototypeSet | None,
                eta: float, lam: float, epochs: int, batch_size: int, rng: np.random.Generator,
                n_classes: int) -> ModelParams:
    """``epochs`` SGD iterations, each on a fresh batch drawn without replacement."""
    if epochs < 1 or batch_size < 1:
        raise ValueError("epochs and batch_size must be >= 1")
    n = len(data)
    if n == 0:
        return params
    size = min(batch_size, n)
    for _ in range(epochs):
        idx = np.sort(rng.choice(n, size=size, replace=False))
        _, grads = loss_and_grad(params, data.subset(idx), global_set, lam, n_classes)
        params = nn.sgd_step(params, grads, eta)
    return params


def normalize(vector: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vector)
    if norm < DEGENERATE_NORM:
        raise DegenerateVectorError(f"prototype norm {norm:.3g} too small to normalize")
    return vector / norm


def submit_prototypes(params: ModelParams, data: LocalDataset, round: int = 0,
                      owner: int = -1) -> list[Prototype]:
    """Prototypes over the full local dataset, scaled to unit length.

    Degenerate classes are skipped with a warning.
    """
    out = []
    for p in compute_prototypes(params, data, round=round, owner=owner):
        try:
            out.append(Prototype(p.class_id, normalize(p.vector), round, owner, True))
        except DegenerateVectorError:
            log.warning("client %s: degenerate prototype for class %s skipped", owner, p.class_id)
    return out


def as_global_set(mapping: Mapping[int, np.ndarray], round: int = 0) -> GlobalPrototypeSet:
    return GlobalPrototypeSet(round, {int(k): np.asarray(v, dtype=np.float64) for k, v in mapping.items()})
