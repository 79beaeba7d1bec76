"""Run metrics and their CSV / JSON-lines emission."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .secure_agg import Transcript

METRICS_HEADER = ["round", "client", "malicious", "accuracy", "loss"]
FILTERS_HEADER = ["round", "class", "client", "weight", "filtered"]
CLASSES_HEADER = ["round", "class", "sum", "trusted_norm", "filtered"]


@dataclass(frozen=True)
class ClientRecord:
    round: int
    client: int
    malicious: bool
    accuracy: float
    loss: float


@dataclass(frozen=True)
class ClassRecord:
    round: int
    class_id: int
    filtered: tuple[int, ...]
    total: float
    trusted_norm: float


@dataclass(frozen=True)
class FilterRecord:
    round: int
    class_id: int
    client: int
    weight: float
    filtered: bool


@dataclass(frozen=True)
class PrototypeDump:
    round: int
    client: int
    class_id: int
    malicious: bool
    vector: np.ndarray


@dataclass
class MetricsLog:
    records: list[ClientRecord] = field(default_factory=list)
    classes: list[ClassRecord] = field(default_factory=list)
    filters: list[FilterRecord] = field(default_factory=list)
    prototypes: list[PrototypeDump] = field(default_factory=list)
    transcript: Transcript = field(default_factory=Transcript)
    removed: dict[int, list[int]] = field(default_factory=dict)  # round -> clients failing the norm check
    reference_gap: dict[int, float] = field(default_factory=dict)  # round -> max |enc - plaintext|
    mask_gap: dict[int, float] = field(default_factory=dict)  # round -> max |enc - enc with fresh masks|

    def benign_accuracy(self) -> list[float]:
        """Mean held-out accuracy of benign clients, one value per round."""
        rounds = sorted({r.round for r in self.records})
        return [float(np.mean([r.accuracy for r in self.records if r.round == t and not r.malicious]))
                for t in rounds]

    def final_accuracy(self, last: int = 1) -> float:
        return float(np.mean(self.benign_accuracy()[-last:]))

    def losses(self, client: int) -> list[float]:
        return [r.loss for r in sorted(self.records, key=lambda r: r.round) if r.client == client]


def _fmt(x: float) -> str:
    return repr(float(x))


def emit_metrics(log: MetricsLog, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in
             ("metrics.csv", "protos.csv", "filters.csv", "classes.csv", "transcript.jsonl")}

    with paths["metrics.csv"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in log.records:
            w.writerow([r.round, r.client, int(r.malicious), _fmt(r.accuracy), _fmt(r.loss)])

    dim = log.prototypes[0].vector.size if log.prototypes else 0
    with paths["protos.csv"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "client", "class", "malicious"] + [f"v{i}" for i in range(dim)])
        for p in log.prototypes:
            w.writerow([p.round, p.client, p.class_id, int(p.malicious)] + [_fmt(x) for x in p.vector])

    with paths["filters.csv"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FILTERS_HEADER)
        for f in log.filters:
            w.writerow([f.round, f.class_id, f.client, _fmt(f.weight), int(f.filtered)])

    with paths["classes.csv"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CLASSES_HEADER)
        for c in log.classes:
            w.writerow([c.round, c.class_id, _fmt(c.total), _fmt(c.trusted_norm),
                        " ".join(str(m) for m in c.filtered)])

    paths["transcript.jsonl"].write_text(log.transcript.to_jsonl())
    return paths


def read_metrics(out_dir) -> MetricsLog:
    """Parse files written by :func:`emit_metrics` back into a log."""
    out = Path(out_dir)
    log = MetricsLog()
    with (out / "metrics.csv").open(newline="") as fh:
        for row in csv.DictReader(fh):
            log.records.append(ClientRecord(int(row["round"]), int(row["client"]), row["malicious"] == "1",
                                            float(row["accuracy"]), float(row["loss"])))
    with (out / "protos.csv").open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            log.prototypes.append(PrototypeDump(int(row[0]), int(row[1]), int(row[2]), row[3] == "1",
                                                np.array([float(x) for x in row[4:]])))
    with (out / "filters.csv").open(newline="") as fh:
        for row in csv.DictReader(fh):
            log.filters.append(FilterRecord(int(row["round"]), int(row["class"]), int(row["client"]),
                                            float(row["weight"]), row["filtered"] == "1"))
    classes_path = out / "classes.csv"
    if classes_path.exists():
        with classes_path.open(newline="") as fh:
            for row in csv.DictReader(fh):
                filtered = tuple(int(m) for m in row["filtered"].split())
                log.classes.append(ClassRecord(int(row["round"]), int(row["class"]), filtered,
                                               float(row["sum"]), float(row["trusted_norm"])))
    log.transcript = Transcript.from_jsonl((out / "transcript.jsonl").read_text())
    return log
