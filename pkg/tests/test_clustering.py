"""k-means and silhouette against direct-formula oracles and known geometry."""
import numpy as np
import pytest

from metascale.clustering import (ClusteringError, DomainRejectionError,
                                  build_domains, kmeans, lloyd_iteration,
                                  query_mean_features, silhouette_score,
                                  standardize)
from metascale.letor import LetorRecord


def _blobs(rng, centers, n_per, spread=0.3):
    points = np.concatenate([c + spread * rng.normal(size=(n_per, len(c)))
                             for c in centers])
    labels = np.repeat(np.arange(len(centers)), n_per)
    return points, labels


def _silhouette_oracle(points, labels):
    """Direct per-point (b - a) / max(a, b), singletons contributing zero."""
    n = len(points)
    uniq = np.unique(labels)
    total = 0.0
    for i in range(n):
        own = labels[i]
        same = [j for j in range(n) if labels[j] == own and j != i]
        if not same:
            continue  # singleton: contributes 0
        a = np.mean([np.linalg.norm(points[i] - points[j]) for j in same])
        b = min(np.mean([np.linalg.norm(points[i] - points[j])
                         for j in range(n) if labels[j] == other])
                for other in uniq if other != own)
        total += (b - a) / max(a, b)
    return total / n


def _same_partition(a, b):
    """Label-permutation-invariant comparison via co-membership."""
    a, b = np.asarray(a), np.asarray(b)
    return np.array_equal(a[:, None] == a[None, :], b[:, None] == b[None, :])


# -- Lloyd iterations and k-means --------------------------------------------

def test_lloyd_wcss_never_increases():
    rng = np.random.default_rng(0)
    points = rng.normal(size=(60, 3))
    centers = points[rng.choice(60, 4, replace=False)].copy()
    last = np.inf
    for _ in range(12):
        labels, centers, wcss = lloyd_iteration(points, centers)
        assert wcss <= last + 1e-9
        last = wcss


@pytest.mark.parametrize("seed", range(5))
def test_kmeans_recovers_separated_blobs(seed):
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]])
    points, truth = _blobs(rng, centers, 25)
    part = kmeans(points, 4, seed=seed)
    assert _same_partition(part.labels, truth)
    assert part.k == 4
    assert part.wcss < 100.0


def test_kmeans_is_deterministic():
    rng = np.random.default_rng(3)
    points = rng.normal(size=(50, 4))
    a = kmeans(points, 5, seed=11)
    b = kmeans(points, 5, seed=11)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.centers, b.centers)


def test_kmeans_input_validation():
    rng = np.random.default_rng(0)
    points = rng.normal(size=(5, 2))
    with pytest.raises(ClusteringError):
        kmeans(points, 6)
    with pytest.raises(ClusteringError):
        kmeans(points, 1)
    dup = np.zeros((6, 2))
    dup[0] = [1.0, 1.0]
    with pytest.raises(ClusteringError, match="distinct"):
        kmeans(dup, 3)


def test_kmeans_handles_near_duplicate_mass():
    # 3 distinct locations, heavily duplicated: still returns 3 clusters
    points = np.array([[0.0, 0.0]] * 10 + [[5.0, 5.0]] * 10 + [[9.0, 0.0]] * 10)
    part = kmeans(points, 3, seed=0)
    assert part.wcss == pytest.approx(0.0, abs=1e-12)
    assert len(set(part.labels.tolist())) == 3


# -- silhouette ---------------------------------------------------------------

@pytest.mark.parametrize("seed", range(8))
def test_silhouette_matches_direct_formula(seed):
    rng = np.random.default_rng(seed)
    points = rng.normal(size=(24, 3))
    labels = rng.integers(0, 3, size=24)
    if len(np.unique(labels)) < 2:
        labels[0] = (labels[0] + 1) % 3
    assert silhouette_score(points, labels) == pytest.approx(
        _silhouette_oracle(points, labels), abs=1e-12)


def test_silhouette_separated_vs_overlapping():
    rng = np.random.default_rng(1)
    far, far_labels = _blobs(rng, np.array([[0.0, 0.0], [20.0, 0.0]]), 30)
    near, near_labels = _blobs(rng, np.array([[0.0, 0.0], [0.5, 0.0]]), 30, spread=1.0)
    assert silhouette_score(far, far_labels) > 0.9
    assert silhouette_score(near, near_labels) < 0.2


def test_silhouette_needs_two_clusters():
    with pytest.raises(ClusteringError):
        silhouette_score(np.zeros((4, 2)), np.zeros(4, dtype=int))


def test_silhouette_singleton_contributes_zero():
    points = np.array([[0.0], [0.1], [5.0]])
    labels = np.array([0, 0, 1])
    assert silhouette_score(points, labels) == pytest.approx(
        _silhouette_oracle(points, labels))


# -- domain building ----------------------------------------------------------

def test_build_domains_accepts_good_structure():
    rng = np.random.default_rng(5)
    centers = rng.normal(0, 10, size=(6, 4))
    points, truth = _blobs(rng, centers, 20, spread=0.4)
    part = build_domains(points, k=6, threshold=0.5, seed=0)
    assert part.silhouette is not None and part.silhouette > 0.5
    assert _same_partition(part.labels, truth)


def test_build_domains_rejects_with_candidate_scores():
    rng = np.random.default_rng(2)
    points = rng.normal(size=(80, 3))  # one big blob: nothing to find
    with pytest.raises(DomainRejectionError) as exc_info:
        build_domains(points, k=10, threshold=0.5, seed=0, candidate_ks=range(2, 6))
    err = exc_info.value
    assert err.k == 10
    assert err.score < 0.5
    assert set(err.scores_by_k) == {2, 3, 4, 5}
    assert "K=2" in str(err)


# -- feature helpers -----------------------------------------------------------

def test_standardize_zero_mean_unit_std():
    rng = np.random.default_rng(0)
    x = rng.normal(3.0, 2.5, size=(40, 3))
    z = standardize(x)
    assert np.allclose(z.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(z.std(axis=0), 1.0, atol=1e-12)


def test_standardize_constant_column_left_finite():
    x = np.column_stack([np.full(10, 7.0), np.arange(10.0)])
    z = standardize(x)
    assert np.all(np.isfinite(z))
    assert np.allclose(z[:, 0], 0.0)


def test_query_mean_features_order_and_padding():
    records = [
        LetorRecord(0, 7, np.array([1.0, 2.0]), None),
        LetorRecord(1, 3, np.array([4.0]), None),
        LetorRecord(2, 7, np.array([3.0, 4.0, 8.0]), None),
    ]
    qids, means = query_mean_features(records)
    assert qids == [7, 3]
    assert means.shape == (2, 3)
    assert np.allclose(means[0], [2.0, 3.0, 4.0])
    assert np.allclose(means[1], [4.0, 0.0, 0.0])
