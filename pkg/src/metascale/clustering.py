"""K-means pseudo-domain building with silhouette-based acceptance.

Lloyd's algorithm with k-means++ seeding, best of several restarts by
within-cluster sum of squares, fully deterministic given a seed. The domain
builder clusters standardized query-level mean feature vectors and rejects
partitions whose mean silhouette falls below the configured threshold,
reporting silhouette scores over a range of K values for diagnosis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seeding import substream


class ClusteringError(Exception):
    pass


class DomainRejectionError(ClusteringError):
    """Silhouette below threshold; carries per-K silhouette scores."""

    def __init__(self, k: int, score: float, threshold: float,
                 scores_by_k: dict[int, float | None]) -> None:
        listing = ", ".join(f"K={kk}: {s:.4f}" if s is not None else f"K={kk}: n/a"
                            for kk, s in sorted(scores_by_k.items()))
        super().__init__(
            f"silhouette {score:.4f} at K={k} below threshold {threshold}; "
            f"candidates: {listing}")
        self.k = k
        self.score = score
        self.scores_by_k = scores_by_k


@dataclass
class DomainPartition:
    """Cluster assignment per record plus the acceptance silhouette."""

    labels: np.ndarray
    k: int
    silhouette: float | None = None
    centers: np.ndarray | None = None
    wcss: float | None = None

    def __post_init__(self) -> None:
        if self.k < 2:
            raise ClusteringError("a partition needs K >= 2")
        if self.labels.min() < 0 or self.labels.max() >= self.k:
            raise ClusteringError("labels out of range for K")


def lloyd_iteration(points: np.ndarray, centers: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray, float]:
    """One assignment + recentering sweep; returns (labels, new centers, wcss).

    The reported wcss is measured at the incoming centers, so consecutive
    iterations yield a non-increasing sequence. Empty clusters keep their
    previous center.
    """
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    wcss = float(d2[np.arange(len(points)), labels].sum())
    new_centers = centers.copy()
    for c in range(centers.shape[0]):
        members = points[labels == c]
        if len(members):
            new_centers[c] = members.mean(axis=0)
    return labels, new_centers, wcss


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[int(rng.integers(n))]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass on existing centers; pick any point
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[c] = points[idx]
        d2 = np.minimum(d2, ((points - centers[c]) ** 2).sum(axis=1))
    return centers


def kmeans(points: np.ndarray, k: int, restarts: int = 8, seed: int = 0,
           max_iter: int = 200) -> DomainPartition:
    """Best-of-restarts Lloyd clustering; deterministic given the seed."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise ClusteringError("points must be a non-empty 2-D array")
    if k < 2:
        raise ClusteringError("K must be >= 2")
    if len(points) < k:
        raise ClusteringError(f"need at least K={k} points, got {len(points)}")
    n_distinct = len(np.unique(points, axis=0))
    if n_distinct < k:
        raise ClusteringError(
            f"only {n_distinct} distinct points; cannot form {k} clusters")

    best: DomainPartition | None = None
    for r in range(restarts):
        rng = substream(seed, "kmeans", r)
        centers = _kmeans_pp_init(points, k, rng)
        labels = None
        for _ in range(max_iter):
            new_labels, centers, _ = lloyd_iteration(points, centers)
            # Re-seed any empty cluster with the point farthest from its center.
            counts = np.bincount(new_labels, minlength=k)
            if (counts == 0).any():
                d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
                nearest = d2[np.arange(len(points)), new_labels]
                for empty in np.flatnonzero(counts == 0):
                    far = int(np.argmax(nearest))
                    centers[empty] = points[far]
                    nearest[far] = 0.0
                labels = None
                continue
            if labels is not None and np.array_equal(labels, new_labels):
                break
            labels = new_labels
        labels, _, wcss = lloyd_iteration(points, centers)
        final_centers = np.array([points[labels == c].mean(axis=0) if (labels == c).any()
                                  else centers[c] for c in range(k)])
        if best is None or wcss < best.wcss:
            best = DomainPartition(labels=labels, k=k, centers=final_centers, wcss=wcss)
    assert best is not None
    return best


def silhouette_score(points: np.ndarray, labels: np.ndarray) -> float:
    """Mean of (b - a) / max(a, b); singleton clusters contribute 0."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    clusters = np.unique(labels)
    if len(clusters) < 2:
        raise ClusteringError("silhouette needs at least 2 non-empty clusters")
    dist = np.sqrt(np.maximum(
        ((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2), 0.0))
    scores = np.zeros(len(points))
    for i in range(len(points)):
        same = labels == labels[i]
        n_same = int(same.sum())
        if n_same <= 1:
            continue  # singleton: s_i = 0
        a = dist[i, same].sum() / (n_same - 1)
        b = min(dist[i, labels == c].mean() for c in clusters if c != labels[i])
        scores[i] = (b - a) / max(a, b)
    return float(scores.mean())


def standardize(points: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance per dimension; constant dimensions left at 0."""
    points = np.asarray(points, dtype=np.float64)
    mean = points.mean(axis=0)
    std = points.std(axis=0)
    std = np.where(std > 0.0, std, 1.0)
    return (points - mean) / std


def query_mean_features(records) -> tuple[list[int], np.ndarray]:
    """Per-qid mean document feature vector, qids in first-seen order.

    Records may have ragged feature lengths (per-line densification); they
    are zero-padded to the longest before averaging.
    """
    by_qid: dict[int, list[np.ndarray]] = {}
    order: list[int] = []
    width = 0
    for rec in records:
        if rec.qid not in by_qid:
            by_qid[rec.qid] = []
            order.append(rec.qid)
        by_qid[rec.qid].append(rec.features)
        width = max(width, len(rec.features))
    if not order:
        raise ClusteringError("no records")
    means = np.zeros((len(order), width))
    for row, qid in enumerate(order):
        padded = np.zeros((len(by_qid[qid]), width))
        for j, f in enumerate(by_qid[qid]):
            padded[j, :len(f)] = f
        means[row] = padded.mean(axis=0)
    return order, means


def build_domains(points: np.ndarray, k: int = 10, threshold: float = 0.5,
                  seed: int = 0, restarts: int = 8,
                  candidate_ks: tuple[int, ...] | None = None) -> DomainPartition:
    """Cluster at the configured K; accept only if mean silhouette >= threshold.

    On rejection, silhouettes for a range of candidate K values are computed
    and attached to the error so the caller can see whether any K would pass.
    """
    points = np.asarray(points, dtype=np.float64)
    part = kmeans(points, k, restarts=restarts, seed=seed)
    score = silhouette_score(points, part.labels)
    if score < threshold:
        if candidate_ks is None:
            candidate_ks = tuple(kk for kk in range(2, 13) if kk <= len(points) - 1)
        scores_by_k: dict[int, float | None] = {}
        for kk in candidate_ks:
            try:
                alt = kmeans(points, kk, restarts=restarts, seed=seed)
                scores_by_k[kk] = silhouette_score(points, alt.labels)
            except ClusteringError:
                scores_by_k[kk] = None
        raise DomainRejectionError(k, score, threshold, scores_by_k)
    part.silhouette = score
    return part
