"""Concrete inner-loop learners bound to a MetaSet.

Each learner exposes parameter groups, a per-batch loss/gradient step, and
split evaluation returning a reward in [0, 1] plus named metrics. The
quadratic learner is closed-form (no graphs) so meta-training dynamics can
be studied cheaply and compared bit-for-bit against plain SGD; the MLP and
dual-affinity learners run on the autodiff graph.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, NumericOverflowError, backward, forward_eval
from .episodes import MetaSet
from .learners import (AffinityDecoderSpec, DualAffinityModel, DualEncoderSpec,
                       MlpModel, MlpSpec, ParamGroup, assign_params, copy_params)
from .objectives import RankedList, cross_entropy, ndcg_at_k, pairwise_rank_loss, top1_accuracy
from .policy import EvalResult, HyperChoice

NDCG_KS = (1, 5, 10)
REWARD_NDCG_K = 5


def _grads_by_group(params: dict[str, np.ndarray], groups: list[ParamGroup],
                    grads: dict[str, np.ndarray]) -> list[list[np.ndarray]]:
    name_of = {id(arr): name for name, arr in params.items()}
    return [[grads[name_of[id(t)]] for t in g.tensors] for g in groups]


class _SnapshotOps:
    def params(self) -> dict[str, np.ndarray]:  # overridden
        raise NotImplementedError

    def snapshot(self) -> dict[str, np.ndarray]:
        return copy_params(self.params())

    def restore(self, saved: dict[str, np.ndarray]) -> None:
        assign_params(self.params(), saved)


# ---------------------------------------------------------------------------
# Quadratic bowls (closed form)

class QuadraticLearner(_SnapshotOps):
    """theta minimizing the batch-mean of per-task quadratic losses.

    Parameters are contiguous chunks of theta, one chunk per group, so the
    geometric curvature ladder in the task family gives each group a
    different preferred step scale.
    """

    def __init__(self, meta_set: MetaSet, n_groups: int, rng: np.random.Generator) -> None:
        d = meta_set.records[0].curvature.shape[0]
        if d % n_groups != 0:
            raise ValueError("theta dimension must be divisible by n_groups")
        self.meta_set = meta_set
        per = d // n_groups
        theta = rng.normal(size=d)
        self.theta_groups = [theta[g * per:(g + 1) * per].copy() for g in range(n_groups)]
        self._groups = [ParamGroup(f"theta{g}", (self.theta_groups[g],), g)
                        for g in range(n_groups)]

    def params(self) -> dict[str, np.ndarray]:
        return {f"theta{g}": arr for g, arr in enumerate(self.theta_groups)}

    def groups(self) -> list[ParamGroup]:
        return self._groups

    def _theta(self) -> np.ndarray:
        return np.concatenate(self.theta_groups)

    def _loss_grad(self, tasks) -> tuple[float, np.ndarray]:
        theta = self._theta()
        loss = 0.0
        grad = np.zeros_like(theta)
        with np.errstate(over="ignore", invalid="ignore"):
            for task in tasks:
                delta = theta - task.minimum
                loss += float(np.sum(task.curvature * delta * delta))
                grad += 2.0 * task.curvature * delta
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise NumericOverflowError("quadratic loss overflowed")
        n = len(tasks)
        return loss / n, grad / n

    def train_loss_and_grads(self, batch_index: int) -> tuple[float, list[list[np.ndarray]]]:
        loss, grad = self._loss_grad(self.meta_set.batch_records(batch_index))
        per = self.theta_groups[0].shape[0]
        grads = [[grad[g * per:(g + 1) * per].copy()] for g in range(len(self.theta_groups))]
        return loss, grads

    def evaluate(self, split: str) -> EvalResult:
        loss, _ = self._loss_grad(self.meta_set.split_records(split))
        reward = 1.0 / (1.0 + loss)
        return EvalResult(reward=reward, metrics={"loss": loss, "reward": reward})


# ---------------------------------------------------------------------------
# Graph-based MLP learners

class MlpClassifierLearner(_SnapshotOps):
    def __init__(self, meta_set: MetaSet, spec: MlpSpec, rng: np.random.Generator) -> None:
        self.meta_set = meta_set
        self.model = MlpModel.init(spec, rng)

    def params(self) -> dict[str, np.ndarray]:
        return self.model.params()

    def groups(self) -> list[ParamGroup]:
        return self.model.groups()

    def train_loss_and_grads(self, batch_index: int) -> tuple[float, list[list[np.ndarray]]]:
        ids = self.meta_set.d_train_batches[batch_index]
        graph = Graph()
        nodes = self.model.bind(graph)
        total = None
        for i in ids:
            logits = self.model.forward(graph, nodes, graph.const(self.meta_set.records[i]))
            ce = cross_entropy(graph, logits, int(self.meta_set.labels[i]))
            total = ce if total is None else graph.add(total, ce)
        loss_node = graph.scale(total, 1.0 / len(ids))
        loss = float(forward_eval(graph, output=loss_node))
        grads = backward(graph, loss_node)
        return loss, _grads_by_group(self.params(), self.groups(), grads)

    def _logits(self, x: np.ndarray) -> np.ndarray:
        graph = Graph()
        nodes = self.model.bind(graph)
        out = self.model.forward(graph, nodes, graph.const(x))
        return forward_eval(graph, output=out)

    def evaluate(self, split: str) -> EvalResult:
        records = self.meta_set.split_records(split)
        labels = self.meta_set.split_labels(split)
        preds = [int(np.argmax(self._logits(x))) for x in records]
        acc = top1_accuracy(preds, labels)
        return EvalResult(reward=acc, metrics={"accuracy": acc})


def _ndcg_metrics(per_query: list[RankedList]) -> tuple[float, dict[str, float]]:
    metrics = {f"ndcg@{k}": float(np.mean([ndcg_at_k(r, k) for r in per_query]))
               for k in NDCG_KS}
    return metrics[f"ndcg@{REWARD_NDCG_K}"], metrics


class MlpRankerLearner(_SnapshotOps):
    def __init__(self, meta_set: MetaSet, spec: MlpSpec, rng: np.random.Generator) -> None:
        self.meta_set = meta_set
        self.model = MlpModel.init(spec, rng)

    def params(self) -> dict[str, np.ndarray]:
        return self.model.params()

    def groups(self) -> list[ParamGroup]:
        return self.model.groups()

    def _query_scores_node(self, graph: Graph, nodes, query):
        per_doc = [self.model.forward(graph, nodes, graph.const(query.features[d]))
                   for d in range(query.features.shape[0])]
        return graph.concat(*per_doc)

    def train_loss_and_grads(self, batch_index: int) -> tuple[float, list[list[np.ndarray]]]:
        queries = self.meta_set.batch_records(batch_index)
        graph = Graph()
        nodes = self.model.bind(graph)
        total = None
        for q in queries:
            scores = self._query_scores_node(graph, nodes, q)
            term = pairwise_rank_loss(graph, scores, q.grades).node
            total = term if total is None else graph.add(total, term)
        loss_node = graph.scale(total, 1.0 / len(queries))
        loss = float(forward_eval(graph, output=loss_node))
        grads = backward(graph, loss_node)
        return loss, _grads_by_group(self.params(), self.groups(), grads)

    def _scores(self, query) -> np.ndarray:
        graph = Graph()
        nodes = self.model.bind(graph)
        out = self._query_scores_node(graph, nodes, query)
        return forward_eval(graph, output=out)

    def evaluate(self, split: str) -> EvalResult:
        ranked = []
        for q in self.meta_set.split_records(split):
            mg = max(2, int(q.grades.max()) if len(q.grades) else 2)
            ranked.append(RankedList(self._scores(q), q.grades, max_grade=mg))
        reward, metrics = _ndcg_metrics(ranked)
        return EvalResult(reward=reward, metrics=metrics)


# ---------------------------------------------------------------------------
# Dual-encoder + affinity-decoder learners

class DualAffinityClassifierLearner(_SnapshotOps):
    def __init__(self, meta_set: MetaSet, encoder_spec: DualEncoderSpec,
                 decoder_spec: AffinityDecoderSpec, rng: np.random.Generator) -> None:
        self.meta_set = meta_set
        self.model = DualAffinityModel.init(encoder_spec, decoder_spec, rng)

    def params(self) -> dict[str, np.ndarray]:
        return self.model.params()

    def groups(self) -> list[ParamGroup]:
        return self.model.groups()

    def train_loss_and_grads(self, batch_index: int) -> tuple[float, list[list[np.ndarray]]]:
        ids = self.meta_set.d_train_batches[batch_index]
        graph = Graph()
        bound = self.model.bind(graph)
        total = None
        for i in ids:
            rec = self.meta_set.records[i]
            logits = self.model.score(graph, rec.semantic, rec.attributes, bound=bound)
            ce = cross_entropy(graph, logits, int(self.meta_set.labels[i]))
            total = ce if total is None else graph.add(total, ce)
        loss_node = graph.scale(total, 1.0 / len(ids))
        loss = float(forward_eval(graph, output=loss_node))
        grads = backward(graph, loss_node)
        return loss, _grads_by_group(self.params(), self.groups(), grads)

    def _logits(self, rec) -> np.ndarray:
        graph = Graph()
        out = self.model.score(graph, rec.semantic, rec.attributes)
        return forward_eval(graph, output=out)

    def evaluate(self, split: str) -> EvalResult:
        records = self.meta_set.split_records(split)
        labels = self.meta_set.split_labels(split)
        preds = [int(np.argmax(self._logits(r))) for r in records]
        acc = top1_accuracy(preds, labels)
        return EvalResult(reward=acc, metrics={"accuracy": acc})


class DualAffinityRankerLearner(_SnapshotOps):
    """Ranks documents whose feature vectors are split semantic | attributes."""

    def __init__(self, meta_set: MetaSet, encoder_spec: DualEncoderSpec,
                 decoder_spec: AffinityDecoderSpec, semantic_features: int,
                 rng: np.random.Generator) -> None:
        self.meta_set = meta_set
        self.model = DualAffinityModel.init(encoder_spec, decoder_spec, rng)
        self.semantic_features = semantic_features

    def params(self) -> dict[str, np.ndarray]:
        return self.model.params()

    def groups(self) -> list[ParamGroup]:
        return self.model.groups()

    def _split_doc(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return features[:self.semantic_features], features[self.semantic_features:]

    def _query_scores_node(self, graph: Graph, bound, query):
        per_doc = []
        for d in range(query.features.shape[0]):
            sem, attr = self._split_doc(query.features[d])
            per_doc.append(self.model.score(graph, sem, attr, bound=bound))
        return graph.concat(*per_doc)

    def train_loss_and_grads(self, batch_index: int) -> tuple[float, list[list[np.ndarray]]]:
        queries = self.meta_set.batch_records(batch_index)
        graph = Graph()
        bound = self.model.bind(graph)
        total = None
        for q in queries:
            scores = self._query_scores_node(graph, bound, q)
            term = pairwise_rank_loss(graph, scores, q.grades).node
            total = term if total is None else graph.add(total, term)
        loss_node = graph.scale(total, 1.0 / len(queries))
        loss = float(forward_eval(graph, output=loss_node))
        grads = backward(graph, loss_node)
        return loss, _grads_by_group(self.params(), self.groups(), grads)

    def _scores(self, query) -> np.ndarray:
        graph = Graph()
        bound = self.model.bind(graph)
        out = self._query_scores_node(graph, bound, query)
        return forward_eval(graph, output=out)

    def evaluate(self, split: str) -> EvalResult:
        ranked = []
        for q in self.meta_set.split_records(split):
            mg = max(2, int(q.grades.max()) if len(q.grades) else 2)
            ranked.append(RankedList(self._scores(q), q.grades, max_grade=mg))
        reward, metrics = _ndcg_metrics(ranked)
        return EvalResult(reward=reward, metrics=metrics)


# ---------------------------------------------------------------------------
# Factories (fixed group counts; width comes from the sampled hyperparameters)

@dataclass(frozen=True)
class QuadraticFactory:
    n_groups: int = 4

    def build(self, meta_set: MetaSet, hyper: HyperChoice,
              rng: np.random.Generator) -> QuadraticLearner:
        return QuadraticLearner(meta_set, self.n_groups, rng)


@dataclass(frozen=True)
class MlpFactory:
    """Builds a classifier or ranker MLP depending on the meta-set kind."""

    hidden_layers: int = 1
    activation: str = "tanh"

    @property
    def n_groups(self) -> int:
        return self.hidden_layers + 1

    def build(self, meta_set: MetaSet, hyper: HyperChoice, rng: np.random.Generator):
        if meta_set.kind == "classification":
            d = int(np.asarray(meta_set.records[0]).shape[0])
            n_classes = len(np.unique(meta_set.labels))
            spec = MlpSpec((d, *([hyper.width] * self.hidden_layers), n_classes),
                           self.activation)
            return MlpClassifierLearner(meta_set, spec, rng)
        if meta_set.kind == "ranking":
            d = int(meta_set.records[0].features.shape[1])
            spec = MlpSpec((d, *([hyper.width] * self.hidden_layers), 1), self.activation)
            return MlpRankerLearner(meta_set, spec, rng)
        raise ValueError(f"MlpFactory cannot handle meta-set kind {meta_set.kind!r}")


@dataclass(frozen=True)
class DualAffinityFactory:
    """Dual-encoder learner; semantic/attribute split comes from the records.

    For ranking data the flat document feature vector is cut at
    semantic_features (auto-chosen as the largest chunk multiple that leaves
    at least two attribute features when unset).
    """

    chunk_size: int = 2
    semantic_features: int | None = None
    activation: str = "tanh"
    attribute_trainable: bool = True

    # 2 semantic-encoder layers + 2 attribute-encoder layers + two GRU
    # directions + initial-state offset + output linear + head.
    @property
    def n_groups(self) -> int:
        return 9

    def _specs(self, width: int, semantic_dim: int, attr_dim: int,
               head_size: int) -> tuple[DualEncoderSpec, AffinityDecoderSpec]:
        if semantic_dim % self.chunk_size != 0:
            raise ValueError(
                f"semantic length {semantic_dim} not divisible by chunk {self.chunk_size}")
        enc = DualEncoderSpec(
            semantic_encoder=MlpSpec((self.chunk_size, width, width), self.activation),
            attribute_encoder=MlpSpec((attr_dim, width, width), self.activation),
            chunk_size=self.chunk_size,
            attribute_trainable=self.attribute_trainable)
        dec = AffinityDecoderSpec(hidden_size=width, state_size=width, head_size=head_size)
        return enc, dec

    def build(self, meta_set: MetaSet, hyper: HyperChoice, rng: np.random.Generator):
        if meta_set.kind == "dual":
            rec = meta_set.records[0]
            n_classes = len(np.unique(meta_set.labels))
            enc, dec = self._specs(hyper.width, rec.semantic.shape[0],
                                   rec.attributes.shape[0], n_classes)
            return DualAffinityClassifierLearner(meta_set, enc, dec, rng)
        if meta_set.kind == "ranking":
            n_feat = int(meta_set.records[0].features.shape[1])
            n_sem = self.semantic_features
            if n_sem is None:
                n_sem = ((n_feat - 2) // self.chunk_size) * self.chunk_size
            if not self.chunk_size <= n_sem < n_feat:
                raise ValueError(f"cannot split {n_feat} features at {n_sem}")
            enc, dec = self._specs(hyper.width, n_sem, n_feat - n_sem, 1)
            return DualAffinityRankerLearner(meta_set, enc, dec, n_sem, rng)
        raise ValueError(f"DualAffinityFactory cannot handle meta-set kind {meta_set.kind!r}")
