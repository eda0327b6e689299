"""Losses and metrics against hand computations and brute-force oracles."""
import itertools

import numpy as np
import pytest

from metascale.autodiff import Graph, backward, forward_eval, grad_check
from metascale.objectives import (MetricSummary, RankedList, confidence_interval,
                                  cross_entropy, ndcg_at_k, pairwise_rank_loss,
                                  top1_accuracy)


# -- cross entropy -----------------------------------------------------------

@pytest.mark.parametrize("seed", range(8))
def test_cross_entropy_value_matches_log_softmax(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=5)
    label = int(rng.integers(5))
    g = Graph()
    loss = cross_entropy(g, g.const(z), label)
    expected = -(z[label] - np.log(np.exp(z - z.max()).sum()) - z.max())
    assert forward_eval(g, output=loss) == pytest.approx(expected, rel=1e-12)


def test_cross_entropy_gradient():
    rng = np.random.default_rng(3)
    z = rng.normal(size=4)
    g = Graph()
    zn = g.param(z, "z")
    loss = cross_entropy(g, zn, 2)
    forward_eval(g, output=loss)
    grads = backward(g, loss)
    probs = np.exp(z - z.max())
    probs /= probs.sum()
    expected = probs.copy()
    expected[2] -= 1.0
    assert np.allclose(grads["z"], expected, atol=1e-12)


def test_cross_entropy_input_validation():
    g = Graph()
    single = g.const(np.array([1.0]))
    with pytest.raises(ValueError):
        cross_entropy(g, single, 0)
    two = g.const(np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        cross_entropy(g, two, 2)
    with pytest.raises(ValueError):
        cross_entropy(g, two, -1)


# -- pairwise ranking loss ---------------------------------------------------

def _pairwise_oracle(scores, grades):
    """Direct double loop over ordered pairs with grade_i > grade_j."""
    total, count = 0.0, 0
    for i in range(len(scores)):
        for j in range(len(scores)):
            if grades[i] > grades[j]:
                total += -np.log(1.0 / (1.0 + np.exp(-(scores[i] - scores[j]))))
                count += 1
    return total / count if count else 0.0


@pytest.mark.parametrize("seed", range(10))
def test_pairwise_loss_matches_pair_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 7))
    scores = rng.normal(size=n)
    grades = rng.integers(0, 3, size=n)
    g = Graph()
    result = pairwise_rank_loss(g, g.const(scores), grades)
    value = forward_eval(g, output=result.node)
    expected = _pairwise_oracle(scores, grades)
    assert value == pytest.approx(expected, rel=1e-10)
    assert result.all_grades_equal == (len(set(grades.tolist())) == 1)


def test_pairwise_loss_gradient():
    rng = np.random.default_rng(11)
    scores = rng.normal(size=5)
    grades = np.array([2, 0, 1, 0, 2])
    g = Graph()
    sn = g.param(scores, "s")
    result = pairwise_rank_loss(g, sn, grades)
    report = grad_check(g, tolerance=1e-6, output=result.node)
    assert report.passed, report.errors


def test_pairwise_all_equal_grades_flagged_zero():
    g = Graph()
    result = pairwise_rank_loss(g, g.const(np.array([0.3, -0.1, 2.0])),
                                np.array([1, 1, 1]))
    assert result.all_grades_equal
    assert forward_eval(g, output=result.node) == 0.0


def test_pairwise_needs_two_docs():
    g = Graph()
    with pytest.raises(ValueError):
        pairwise_rank_loss(g, g.const(np.array([1.0])), np.array([1]))


# -- NDCG --------------------------------------------------------------------

def _dcg(grades_in_order, k):
    g = np.asarray(grades_in_order, dtype=float)[:k]
    return float(np.sum((2.0 ** g - 1.0) / np.log2(np.arange(2, g.size + 2))))


def test_ndcg_hand_cases():
    perfect = RankedList(np.array([3.0, 2.0, 1.0]), np.array([2, 1, 0]))
    assert ndcg_at_k(perfect, 3) == pytest.approx(1.0)
    reversed_ = RankedList(np.array([1.0, 2.0, 3.0]), np.array([2, 1, 0]))
    ideal = _dcg([2, 1, 0], 3)
    assert ndcg_at_k(reversed_, 3) == pytest.approx(_dcg([0, 1, 2], 3) / ideal)
    assert ndcg_at_k(reversed_, 1) == pytest.approx(0.0)


def test_ndcg_zero_when_nothing_relevant():
    ranked = RankedList(np.array([2.0, 1.0]), np.array([0, 0]))
    assert ndcg_at_k(ranked, 2) == 0.0


def test_ndcg_ties_keep_input_order():
    ranked = RankedList(np.array([1.0, 1.0, 1.0]), np.array([0, 2, 1]))
    ideal = _dcg([2, 1, 0], 3)
    assert ndcg_at_k(ranked, 3) == pytest.approx(_dcg([0, 2, 1], 3) / ideal)


@pytest.mark.parametrize("seed", range(6))
def test_ndcg_matches_best_ordering_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 6))
    grades = rng.integers(0, 3, size=n)
    scores = rng.permutation(np.arange(n, dtype=float) + 1)
    for k in range(1, n + 1):
        got = ndcg_at_k(RankedList(scores, grades), k)
        order = np.argsort(-scores, kind="stable")
        best = max(_dcg(p, k) for p in itertools.permutations(grades.tolist()))
        expected = _dcg(grades[order], k) / best if best > 0 else 0.0
        assert got == pytest.approx(expected, abs=1e-12)


def test_ranked_list_validation():
    with pytest.raises(ValueError):
        RankedList(np.array([1.0]), np.array([3]))  # above max grade
    with pytest.raises(ValueError):
        RankedList(np.array([1.0]), np.array([-1]))
    with pytest.raises(ValueError):
        RankedList(np.array([1.0, 2.0]), np.array([1]))
    with pytest.raises(ValueError):
        RankedList(np.array([]), np.array([]))
    with pytest.raises(ValueError):
        ndcg_at_k(RankedList(np.array([1.0]), np.array([1])), 0)


# -- accuracy and confidence intervals ---------------------------------------

def test_top1_accuracy():
    assert top1_accuracy([0, 1, 2, 1], [0, 1, 1, 1]) == pytest.approx(0.75)
    assert top1_accuracy([5], [5]) == 1.0
    with pytest.raises(ValueError):
        top1_accuracy([0, 1], [0])
    with pytest.raises(ValueError):
        top1_accuracy([], [])


def test_confidence_interval_hand_computed():
    values = [1.0, 2.0, 3.0, 4.0]
    s = np.std(values, ddof=1)
    ci = confidence_interval(values)
    assert ci.mean == pytest.approx(2.5)
    assert ci.half_width == pytest.approx(2.5758 * s / 2.0)
    assert ci.n_runs == 4
    assert ci.confidence_level == 0.99
    assert ci.lo == pytest.approx(ci.mean - ci.half_width)
    assert ci.hi == pytest.approx(ci.mean + ci.half_width)


def test_confidence_interval_identical_values_zero_width():
    ci = confidence_interval([0.5, 0.5, 0.5])
    assert ci.half_width == 0.0


def test_confidence_interval_requires_two_values():
    with pytest.raises(ValueError):
        confidence_interval([1.0])
    with pytest.raises(ValueError):
        confidence_interval([])


def test_confidence_interval_level_pinned():
    with pytest.raises(ValueError):
        confidence_interval([1.0, 2.0], level=0.95)


def test_metric_summary_invariants():
    with pytest.raises(ValueError):
        MetricSummary(mean=0.5, half_width=-0.1, n_runs=3)
    with pytest.raises(ValueError):
        MetricSummary(mean=0.5, half_width=0.1, n_runs=1)
