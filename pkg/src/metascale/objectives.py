"""Losses built from graph ops, plus ranking/classification metrics.

The losses return node ids on a caller-supplied graph so they can sit on top
of any model head. The metrics are plain numpy: they are only ever needed on
detached scores.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, NodeId

Z_99 = 2.5758  # two-sided 99% normal quantile, pinned for reproducibility


@dataclass(frozen=True)
class RankedList:
    """Scores and integer relevance grades for the documents of one query."""

    scores: np.ndarray
    grades: np.ndarray
    max_grade: int = 2

    def __post_init__(self) -> None:
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64))
        object.__setattr__(self, "grades", np.asarray(self.grades))
        if self.scores.ndim != 1 or self.scores.shape != self.grades.shape:
            raise ValueError(
                f"scores {self.scores.shape} and grades {self.grades.shape} "
                "must be equal-length vectors")
        if self.scores.size == 0:
            raise ValueError("empty ranked list")
        g = self.grades
        if np.any(g < 0) or np.any(g > self.max_grade) or np.any(g != np.round(g)):
            raise ValueError(f"grades must be integers in [0, {self.max_grade}]")

    @property
    def items(self) -> list[tuple[float, int]]:
        return [(float(s), int(g)) for s, g in zip(self.scores, self.grades)]


@dataclass(frozen=True)
class MetricSummary:
    """Sample mean with a symmetric normal-approximation confidence interval."""

    mean: float
    half_width: float
    n_runs: int
    confidence_level: float = 0.99

    def __post_init__(self) -> None:
        if self.half_width < 0:
            raise ValueError("half_width must be non-negative")
        if self.n_runs < 2:
            raise ValueError("a confidence interval needs at least 2 runs")

    @property
    def lo(self) -> float:
        return self.mean - self.half_width

    @property
    def hi(self) -> float:
        return self.mean + self.half_width


@dataclass(frozen=True)
class PairwiseRankLoss:
    """Loss node plus a flag marking queries with no gradable pair."""

    node: NodeId
    all_grades_equal: bool = False


def cross_entropy(graph: Graph, logits: NodeId, label: int) -> NodeId:
    """-log softmax(logits)[label], built as slice-then-log for stability.

    The softmax itself is computed with a max shift, so huge logits stay
    finite; slicing the true-class probability before the log avoids forming
    log of the whole (possibly underflowing) distribution. If the picked
    probability still underflows to exactly 0, evaluation aborts loudly
    rather than silently clipping.
    """
    shape = graph.nodes[logits].shape
    if len(shape) != 1 or shape[0] < 2:
        raise ValueError("cross_entropy needs a vector of at least 2 logits")
    if not 0 <= label < shape[0]:
        raise ValueError(f"label {label} out of range for {shape[0]} classes")
    p = graph.slice(graph.softmax(logits), label, label + 1)
    return graph.neg(graph.sum(graph.log(p)))


def pairwise_rank_loss(graph: Graph, scores: NodeId, grades: np.ndarray) -> PairwiseRankLoss:
    """Mean log(1 + exp(-(s_i - s_j))) over pairs with grade_i > grade_j.

    Built as -log sigmoid(s_i - s_j), the same quantity. Pair differences
    come from a single matmul with a constant +1/-1 selection matrix. When
    every grade is equal there is no gradable pair; the loss is a constant
    zero and the result is flagged.
    """
    grades = np.asarray(grades)
    n = graph.nodes[scores].shape[0]
    if grades.shape != (n,):
        raise ValueError(f"grades shape {grades.shape} does not match {n} scores")
    if n < 2:
        raise ValueError("pairwise loss needs at least 2 scores")
    pairs = [(i, j) for i in range(n) for j in range(n) if grades[i] > grades[j]]
    if not pairs:
        return PairwiseRankLoss(graph.const(np.asarray(0.0)), all_grades_equal=True)
    diff = np.zeros((len(pairs), n))
    for row, (i, j) in enumerate(pairs):
        diff[row, i] = 1.0
        diff[row, j] = -1.0
    margins = graph.matmul(graph.const(diff), scores)
    node = graph.neg(graph.mean(graph.log(graph.sigmoid(margins))))
    return PairwiseRankLoss(node)


def ndcg_at_k(ranked: RankedList, k: int) -> float:
    """NDCG@k with gains 2^grade - 1 and log2(rank+1) discounts.

    Documents are ordered by descending score; ties keep their original
    input order (stable sort), so equal scores never reorder documents.
    Returns 0.0 when the ideal DCG is 0 (no relevant documents).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    order = np.argsort(-ranked.scores, kind="stable")
    gains = np.power(2.0, ranked.grades.astype(np.float64)) - 1.0
    discounts = 1.0 / np.log2(np.arange(2, k + 2, dtype=np.float64))

    def dcg(g: np.ndarray) -> float:
        top = g[:k]
        return float(np.sum(top * discounts[:top.size]))

    ideal = dcg(np.sort(gains)[::-1])
    if ideal == 0.0:
        return 0.0
    return dcg(gains[order]) / ideal


def top1_accuracy(predictions, labels) -> float:
    """Fraction of positions where predicted class index equals the label."""
    pred = np.asarray(predictions).reshape(-1)
    lab = np.asarray(labels).reshape(-1)
    if pred.shape != lab.shape or pred.size == 0:
        raise ValueError("predictions and labels must be equal-length and non-empty")
    return float(np.mean(pred == lab))


def confidence_interval(values, level: float = 0.99) -> MetricSummary:
    """Mean +- z * s / sqrt(n), z = 2.5758 (two-sided 99%), s sample std (ddof=1)."""
    if level != 0.99:
        raise ValueError("only the 99% level is supported (z pinned at 2.5758)")
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size < 2:
        raise ValueError("confidence_interval needs at least 2 values")
    mean = float(arr.mean())
    s = float(arr.std(ddof=1))
    return MetricSummary(mean=mean, half_width=Z_99 * s / float(np.sqrt(arr.size)),
                         n_runs=int(arr.size), confidence_level=level)
