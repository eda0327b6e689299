"""Episodic few-shot task construction.

A RecordSet is a flat list of records with one class/domain label each; the
meta-set builder draws disjoint train/heldout/test splits from it and
partitions the training records into static k-shot batches that stay fixed
for the whole run. Ranking data uses domain-level splits (whole domains go
to train, validation, or test); classification and synthetic families split
at the record level with classes shared across splits.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .clustering import DomainPartition, query_mean_features, standardize
from .letor import LetorRecord
from .seeding import substream

FAMILY_KINDS = ("quadratic_bowl", "gaussian_blobs", "two_group_attributes")


@dataclass(frozen=True)
class QuadraticTask:
    """One loss surface L(theta) = sum_i curvature_i * (theta_i - minimum_i)^2."""

    curvature: np.ndarray
    minimum: np.ndarray


@dataclass(frozen=True)
class DualRecord:
    """Paired feature groups for the dual-encoder models."""

    semantic: np.ndarray
    attributes: np.ndarray


@dataclass(frozen=True)
class RankingQuery:
    qid: int
    features: np.ndarray  # (n_docs, n_features)
    grades: np.ndarray    # (n_docs,)


@dataclass
class RecordSet:
    """Records plus one integer class/domain label per record."""

    kind: str  # "quadratic" | "classification" | "dual" | "ranking"
    records: list
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=int)
        if len(self.records) != len(self.labels):
            raise ValueError("one label per record required")


@dataclass(frozen=True)
class EpisodeCounts:
    """Per-class training shots and total heldout/test record counts."""

    train_shots: int = 5
    heldout: int = 15
    test: int = 15

    def to_json_dict(self) -> dict:
        return {"train_shots": self.train_shots, "heldout": self.heldout, "test": self.test}

    @classmethod
    def from_json_dict(cls, d) -> "EpisodeCounts":
        return cls(int(d.get("train_shots", 5)), int(d.get("heldout", 15)),
                   int(d.get("test", 15)))


@dataclass(frozen=True)
class DomainSplitSpec:
    """How many whole domains go to each split (ranking mode)."""

    train_domains: int = 5
    val_domains: int = 2
    test_domains: int = 3

    def to_json_dict(self) -> dict:
        return {"train_domains": self.train_domains, "val_domains": self.val_domains,
                "test_domains": self.test_domains}

    @classmethod
    def from_json_dict(cls, d) -> "DomainSplitSpec":
        return cls(int(d.get("train_domains", 5)), int(d.get("val_domains", 2)),
                   int(d.get("test_domains", 3)))


@dataclass
class MetaSet:
    """Static episodic splits over a RecordSet, all stored as record indices."""

    kind: str
    d_train_batches: list[list[int]]
    d_heldout: list[int]
    d_test: list[int]
    records: list
    labels: np.ndarray
    k: int
    n_classes: int
    manifest: dict

    def batch_records(self, t: int) -> list:
        return [self.records[i] for i in self.d_train_batches[t]]

    def _split_ids(self, split: str) -> tuple[int, ...]:
        if split == "heldout":
            return self.d_heldout
        if split == "test":
            return self.d_test
        raise ValueError(f"unknown split {split!r}, expected 'heldout' or 'test'")

    def split_records(self, split: str) -> list:
        return [self.records[i] for i in self._split_ids(split)]

    def split_labels(self, split: str) -> np.ndarray:
        return self.labels[list(self._split_ids(split))]


@dataclass(frozen=True)
class SyntheticFamilySpec:
    family: str
    dimension: int
    noise: float
    seed: int
    n_classes: int = 4
    n_groups: int = 4

    def __post_init__(self) -> None:
        if self.family not in FAMILY_KINDS:
            raise ValueError(f"family must be one of {FAMILY_KINDS}")
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")

    def to_json_dict(self) -> dict:
        return {"family": self.family, "dimension": self.dimension, "noise": self.noise,
                "seed": self.seed, "n_classes": self.n_classes, "n_groups": self.n_groups}

    @classmethod
    def from_json_dict(cls, d) -> "SyntheticFamilySpec":
        return cls(d["family"], int(d["dimension"]), float(d["noise"]), int(d["seed"]),
                   int(d.get("n_classes", 4)), int(d.get("n_groups", 4)))


def synth_tasks(spec: SyntheticFamilySpec, n_tasks: int) -> RecordSet:
    """Generate a deterministic task family from a family spec.

    quadratic_bowl: n_tasks loss surfaces sharing a family minimum, with
    per-dimension curvature on a geometric ladder across parameter groups so
    different groups genuinely want different step scales.
    gaussian_blobs: n_tasks records per class around well-separated means.
    two_group_attributes: like gaussian_blobs but each record is a
    (semantic, attributes) pair with per-class prototypes for both groups.
    """
    rng = substream(spec.seed, "synth", spec.family)
    d = spec.dimension
    if spec.family == "quadratic_bowl":
        if spec.n_groups < 1 or d % spec.n_groups != 0:
            raise ValueError("dimension must be divisible by n_groups")
        per = d // spec.n_groups
        ladder = np.repeat(4.0 * 0.25 ** np.arange(spec.n_groups), per)
        family_min = rng.uniform(-2.0, 2.0, size=d)
        tasks = []
        for _ in range(n_tasks):
            curvature = ladder * rng.uniform(0.8, 1.25, size=d)
            minimum = family_min + spec.noise * rng.normal(size=d)
            tasks.append(QuadraticTask(curvature, minimum))
        return RecordSet("quadratic", tasks, np.zeros(n_tasks, dtype=int),
                         meta={"dimension": d, "n_groups": spec.n_groups})
    if spec.family == "gaussian_blobs":
        means = rng.normal(0.0, 3.0, size=(spec.n_classes, d))
        records, labels = [], []
        for c in range(spec.n_classes):
            for _ in range(n_tasks):
                records.append(means[c] + spec.noise * rng.normal(size=d))
                labels.append(c)
        return RecordSet("classification", records, np.array(labels),
                         meta={"dimension": d, "n_classes": spec.n_classes})
    # two_group_attributes
    d_attr = max(2, d // 2)
    sem_proto = rng.normal(0.0, 3.0, size=(spec.n_classes, d))
    attr_proto = rng.normal(0.0, 3.0, size=(spec.n_classes, d_attr))
    records, labels = [], []
    for c in range(spec.n_classes):
        for _ in range(n_tasks):
            records.append(DualRecord(
                sem_proto[c] + spec.noise * rng.normal(size=d),
                attr_proto[c] + spec.noise * rng.normal(size=d_attr)))
            labels.append(c)
    return RecordSet("dual", records, np.array(labels),
                     meta={"semantic_dim": d, "attribute_dim": d_attr,
                           "n_classes": spec.n_classes})


def letor_record_set(records: Sequence[LetorRecord],
                     partition: DomainPartition) -> RecordSet:
    """Group parsed LETOR lines into per-query records with domain labels."""
    qids, _ = query_mean_features(records)
    domain_of = {qid: int(partition.labels[i]) for i, qid in enumerate(qids)}
    width = max(len(r.features) for r in records)
    queries: list[RankingQuery] = []
    labels = []
    by_qid: dict[int, list[LetorRecord]] = {}
    for rec in records:
        by_qid.setdefault(rec.qid, []).append(rec)
    for qid in qids:
        docs = by_qid[qid]
        feats = np.zeros((len(docs), width))
        grades = np.zeros(len(docs), dtype=int)
        for i, doc in enumerate(docs):
            feats[i, :len(doc.features)] = doc.features
            grades[i] = doc.relevance
        queries.append(RankingQuery(qid, feats, grades))
        labels.append(domain_of[qid])
    return RecordSet("ranking", queries, np.array(labels),
                     meta={"n_features": width, "max_grade": int(max(r.relevance
                                                                     for r in records))})


def build_letor_domains(records: Sequence[LetorRecord], k: int = 10,
                        threshold: float = 0.5, seed: int = 0) -> DomainPartition:
    """Cluster standardized per-query mean feature vectors into pseudo-domains."""
    from .clustering import build_domains
    _, means = query_mean_features(records)
    return build_domains(standardize(means), k=k, threshold=threshold, seed=seed)


def _chunk(indices: list[int], k: int, what: str) -> list[list[int]]:
    if len(indices) % k != 0:
        raise ValueError(f"{what}: {len(indices)} training records not divisible by k={k}")
    return [indices[i:i + k] for i in range(0, len(indices), k)]


def make_meta_set(record_set: RecordSet, k: int, counts: EpisodeCounts,
                  combo_seed: int | tuple, n_per_batch: int | None = None,
                  domain_split: DomainSplitSpec | None = None) -> MetaSet:
    """Draw disjoint splits and static k-shot training batches.

    Ranking record sets use domain-level splits (per domain_split); all other
    kinds split at the record level with every class present in training.
    Heldout and test take `counts.heldout` / `counts.test` records in total,
    sampled without replacement. Each training batch holds exactly k records
    per included class; batches partition the selected training records.
    """
    rng = substream(combo_seed, "meta_set")
    if record_set.kind == "ranking":
        if domain_split is None:
            domain_split = DomainSplitSpec()
        return _domain_split_meta_set(record_set, k, counts, rng, n_per_batch, domain_split)
    return _record_split_meta_set(record_set, k, counts, rng, n_per_batch)


def _assemble_batches(per_class_chunks: dict[int, list[list[int]]],
                      class_order: list[int], n_per_batch: int | None) -> list[list[int]]:
    n_classes = len(class_order)
    n = n_per_batch if n_per_batch is not None else n_classes
    if n < 1 or n_classes % n != 0:
        raise ValueError(f"{n_classes} classes not divisible into batches of {n}")
    n_chunks = len(per_class_chunks[class_order[0]])
    batches = []
    for group_start in range(0, n_classes, n):
        group = class_order[group_start:group_start + n]
        for j in range(n_chunks):
            batch: list[int] = []
            for c in group:
                batch.extend(per_class_chunks[c][j])
            batches.append(batch)
    return batches


def _record_split_meta_set(record_set: RecordSet, k: int, counts: EpisodeCounts,
                           rng: np.random.Generator,
                           n_per_batch: int | None) -> MetaSet:
    labels = record_set.labels
    classes = sorted(int(c) for c in np.unique(labels))
    train_ids: list[int] = []
    per_class_chunks: dict[int, list[list[int]]] = {}
    leftover: list[int] = []
    for c in classes:
        members = [int(i) for i in rng.permutation(np.flatnonzero(labels == c))]
        if len(members) < counts.train_shots:
            raise ValueError(
                f"class {c} has {len(members)} records, needs {counts.train_shots} for training")
        chosen = members[:counts.train_shots]
        per_class_chunks[c] = _chunk(chosen, k, f"class {c}")
        train_ids.extend(chosen)
        leftover.extend(members[counts.train_shots:])
    pool = [leftover[int(i)] for i in rng.permutation(len(leftover))]
    if len(pool) < counts.heldout + counts.test:
        raise ValueError(
            f"{len(pool)} records left after training; need "
            f"{counts.heldout} heldout + {counts.test} test")
    heldout = pool[:counts.heldout]
    test = pool[counts.heldout:counts.heldout + counts.test]
    batches = _assemble_batches(per_class_chunks, classes, n_per_batch)
    n = n_per_batch if n_per_batch is not None else len(classes)
    manifest = _manifest(record_set, batches, heldout, test, k, n)
    return MetaSet(record_set.kind, batches, heldout, test, record_set.records,
                   labels, k, n, manifest)


def _domain_split_meta_set(record_set: RecordSet, k: int, counts: EpisodeCounts,
                           rng: np.random.Generator, n_per_batch: int | None,
                           split: DomainSplitSpec) -> MetaSet:
    labels = record_set.labels
    domains = [int(c) for c in np.unique(labels)]
    need = split.train_domains + split.val_domains + split.test_domains
    if len(domains) < need:
        raise ValueError(f"{len(domains)} domains available, split needs {need}")
    order = [domains[int(i)] for i in rng.permutation(len(domains))]
    train_domains = order[:split.train_domains]
    val_domains = order[split.train_domains:split.train_domains + split.val_domains]
    test_domains = order[split.train_domains + split.val_domains:need]

    per_class_chunks: dict[int, list[list[int]]] = {}
    for dom in train_domains:
        members = [int(i) for i in rng.permutation(np.flatnonzero(labels == dom))]
        if len(members) < counts.train_shots:
            raise ValueError(
                f"domain {dom} has {len(members)} records, needs {counts.train_shots}")
        per_class_chunks[dom] = _chunk(members[:counts.train_shots], k, f"domain {dom}")

    def draw(doms: list[int], want: int, what: str) -> list[int]:
        pool = [int(i) for i in np.flatnonzero(np.isin(labels, doms))]
        pool = [pool[int(i)] for i in rng.permutation(len(pool))]
        if len(pool) < want:
            raise ValueError(f"{what}: {len(pool)} records available, need {want}")
        return pool[:want]

    heldout = draw(val_domains, counts.heldout, "heldout")
    test = draw(test_domains, counts.test, "test")
    batches = _assemble_batches(per_class_chunks, train_domains, n_per_batch)
    n = n_per_batch if n_per_batch is not None else len(train_domains)
    manifest = _manifest(record_set, batches, heldout, test, k, n)
    manifest["domain_split"] = {"train": train_domains, "val": val_domains,
                                "test": test_domains}
    return MetaSet(record_set.kind, batches, heldout, test, record_set.records,
                   labels, k, n, manifest)


def _manifest(record_set: RecordSet, batches: list[list[int]], heldout: list[int],
              test: list[int], k: int, n: int) -> dict:
    train_ids = [i for b in batches for i in b]
    manifest = {
        "format_version": 1,
        "kind": record_set.kind,
        "k": k,
        "n_classes": n,
        "splits": {"train": train_ids, "heldout": list(heldout), "test": list(test)},
        "batches": [list(b) for b in batches],
    }
    if record_set.kind == "ranking":
        manifest["qids"] = {str(i): int(record_set.records[i].qid)
                            for i in train_ids + list(heldout) + list(test)}
    overlap = (set(train_ids) & set(heldout)) | (set(train_ids) & set(test)) \
        | (set(heldout) & set(test))
    if overlap:
        raise AssertionError(f"split overlap: {sorted(overlap)[:5]}")
    return manifest
