"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Graph` is a flat list of operation nodes in topological (creation)
order. Parameters are leaf nodes holding references to caller-owned arrays,
so in-place parameter updates are visible to an already-built graph and the
same graph can be re-evaluated across training steps. The op set is fixed to
what the learners and losses need: matmul, add, elementwise multiply, concat,
slice, sigmoid, tanh, softmax, log, mean, sum, and stop_gradient.

Any non-finite value produced by a completed op aborts the computation with
:class:`NumericOverflowError` instead of letting NaN/Inf propagate.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

NodeId = int


class GraphError(Exception):
    """Base class for graph construction and evaluation errors."""


class ShapeMismatchError(GraphError):
    """Operand shapes incompatible for the op; message names the node."""


class NumericOverflowError(GraphError):
    """A completed op produced a NaN or infinity."""


class BackwardBeforeForwardError(GraphError):
    """backward() was called before any forward evaluation."""


def as_array(values, shape: Sequence[int] | None = None) -> np.ndarray:
    """Coerce to a float64 array, optionally reshaped, rejecting non-finite input."""
    arr = np.asarray(values, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise NumericOverflowError("non-finite value in tensor literal")
    return arr


@dataclass
class Node:
    idx: NodeId
    op: str
    inputs: tuple[NodeId, ...]
    shape: tuple[int, ...]
    attrs: dict = field(default_factory=dict)
    value: np.ndarray | None = None  # cached forward value


@dataclass
class GradCheckReport:
    """Max relative error |g_ad - g_fd| / max(1e-12, |g_fd|) per parameter."""

    errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


class Graph:
    """A DAG of float64 ops supporting one forward/backward pair at a time.

    Confined to a single thread for a forward/backward pair; independent
    graphs may run in parallel since no state is shared between instances.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.param_names: dict[NodeId, str] = {}
        self.param_arrays: dict[NodeId, np.ndarray] = {}  # by reference
        self.input_ids: dict[str, NodeId] = {}
        self._forward_done = False

    # -- construction ------------------------------------------------------

    def _add(self, op: str, inputs: tuple[NodeId, ...], shape: tuple[int, ...],
             attrs: dict | None = None) -> NodeId:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"node {len(self.nodes)} ({op}): unknown input id {i}")
        node = Node(len(self.nodes), op, inputs, shape, attrs or {})
        self.nodes.append(node)
        self._forward_done = False
        return node.idx

    def _shape(self, i: NodeId) -> tuple[int, ...]:
        return self.nodes[i].shape

    def param(self, values, name: str) -> NodeId:
        """Leaf parameter node. `values` is held by reference, not copied."""
        arr = np.asarray(values, dtype=np.float64)
        if name in self.param_names.values():
            raise GraphError(f"duplicate parameter name {name!r}")
        idx = self._add("param", (), arr.shape)
        self.param_names[idx] = name
        self.param_arrays[idx] = arr
        return idx

    def input(self, name: str, shape: Sequence[int]) -> NodeId:
        """Named placeholder bound at forward_eval time."""
        if name in self.input_ids:
            raise GraphError(f"duplicate input name {name!r}")
        idx = self._add("input", (), tuple(int(s) for s in shape))
        self.input_ids[name] = idx
        return idx

    def const(self, values) -> NodeId:
        arr = as_array(values)
        idx = self._add("const", (), arr.shape)
        self.nodes[idx].attrs["value"] = arr
        return idx

    def matmul(self, a: NodeId, b: NodeId) -> NodeId:
        sa, sb = self._shape(a), self._shape(b)
        if len(sa) != 2 or len(sb) not in (1, 2) or sa[1] != sb[0]:
            raise ShapeMismatchError(
                f"node {len(self.nodes)} (matmul): cannot multiply {sa} by {sb}")
        out = (sa[0],) if len(sb) == 1 else (sa[0], sb[1])
        return self._add("matmul", (a, b), out)

    def _elementwise_pair(self, op: str, a: NodeId, b: NodeId) -> NodeId:
        sa, sb = self._shape(a), self._shape(b)
        if sa != sb:
            raise ShapeMismatchError(
                f"node {len(self.nodes)} ({op}): shapes {sa} and {sb} differ")
        return self._add(op, (a, b), sa)

    def add(self, a: NodeId, b: NodeId) -> NodeId:
        return self._elementwise_pair("add", a, b)

    def mul(self, a: NodeId, b: NodeId) -> NodeId:
        return self._elementwise_pair("mul", a, b)

    def concat(self, *parts: NodeId) -> NodeId:
        if not parts:
            raise GraphError("concat of zero nodes")
        for p in parts:
            if len(self._shape(p)) != 1:
                raise ShapeMismatchError(
                    f"node {len(self.nodes)} (concat): input {p} is not 1-D")
        total = sum(self._shape(p)[0] for p in parts)
        return self._add("concat", tuple(parts), (total,))

    def slice(self, a: NodeId, start: int, stop: int) -> NodeId:
        sa = self._shape(a)
        if len(sa) != 1 or not 0 <= start < stop <= sa[0]:
            raise ShapeMismatchError(
                f"node {len(self.nodes)} (slice): range [{start}:{stop}] invalid for {sa}")
        return self._add("slice", (a,), (stop - start,), {"start": start, "stop": stop})

    def sigmoid(self, a: NodeId) -> NodeId:
        return self._add("sigmoid", (a,), self._shape(a))

    def tanh(self, a: NodeId) -> NodeId:
        return self._add("tanh", (a,), self._shape(a))

    def softmax(self, a: NodeId) -> NodeId:
        if len(self._shape(a)) != 1:
            raise ShapeMismatchError(f"node {len(self.nodes)} (softmax): input must be 1-D")
        return self._add("softmax", (a,), self._shape(a))

    def log(self, a: NodeId) -> NodeId:
        return self._add("log", (a,), self._shape(a))

    def mean(self, a: NodeId) -> NodeId:
        return self._add("mean", (a,), ())

    def sum(self, a: NodeId) -> NodeId:
        return self._add("sum", (a,), ())

    def stop_gradient(self, a: NodeId) -> NodeId:
        """Identity forward, zero backward."""
        return self._add("stop_gradient", (a,), self._shape(a))

    # Convenience wrappers expanding to the core op set.

    def scale(self, a: NodeId, c: float) -> NodeId:
        return self.mul(a, self.const(np.full(self._shape(a), float(c))))

    def neg(self, a: NodeId) -> NodeId:
        return self.scale(a, -1.0)

    def sub(self, a: NodeId, b: NodeId) -> NodeId:
        return self.add(a, self.neg(b))

    def add_const(self, a: NodeId, values) -> NodeId:
        arr = np.broadcast_to(as_array(values), self._shape(a)).copy()
        return self.add(a, self.const(arr))


_ACT = {
    "sigmoid": lambda x: 1.0 / (1.0 + np.exp(-x)),
    "tanh": np.tanh,
}


def _forward_op(node: Node, vals: list[np.ndarray]) -> np.ndarray:
    op = node.op
    ins = [vals[i] for i in node.inputs]
    if op == "matmul":
        return ins[0] @ ins[1]
    if op == "add":
        return ins[0] + ins[1]
    if op == "mul":
        return ins[0] * ins[1]
    if op == "concat":
        return np.concatenate(ins)
    if op == "slice":
        return ins[0][node.attrs["start"]:node.attrs["stop"]]
    if op == "sigmoid":
        return _ACT["sigmoid"](ins[0])
    if op == "tanh":
        return np.tanh(ins[0])
    if op == "softmax":
        z = ins[0] - np.max(ins[0])
        e = np.exp(z)
        return e / e.sum()
    if op == "log":
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(ins[0])
    if op == "mean":
        return np.asarray(ins[0].mean())
    if op == "sum":
        return np.asarray(ins[0].sum())
    if op == "stop_gradient":
        return ins[0]
    raise GraphError(f"unknown op {op!r}")


def forward_eval(graph: Graph, inputs: Mapping[str, np.ndarray] | None = None,
                 output: NodeId | None = None) -> np.ndarray:
    """Evaluate all nodes in topological order and return `output`'s value.

    `inputs` binds every input placeholder by name. Intermediate values are
    cached on the nodes for the subsequent backward pass. Identical inputs
    produce bit-identical outputs.
    """
    feed = dict(inputs or {})
    unknown = set(feed) - set(graph.input_ids)
    if unknown:
        raise GraphError(f"unknown input names: {sorted(unknown)}")
    missing = set(graph.input_ids) - set(feed)
    if missing:
        raise GraphError(f"inputs not provided: {sorted(missing)}")

    vals: list[np.ndarray] = [None] * len(graph.nodes)  # type: ignore[list-item]
    for node in graph.nodes:
        if node.op == "param":
            v = graph.param_arrays[node.idx]
        elif node.op == "input":
            v = np.asarray(feed[_input_name(graph, node.idx)], dtype=np.float64)
            if v.shape != node.shape:
                raise ShapeMismatchError(
                    f"node {node.idx} (input): fed shape {v.shape}, declared {node.shape}")
        elif node.op == "const":
            v = node.attrs["value"]
        else:
            # overflow is reported through NumericOverflowError below
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                v = _forward_op(node, vals)
        if not np.all(np.isfinite(v)):
            raise NumericOverflowError(f"non-finite value at node {node.idx} ({node.op})")
        vals[node.idx] = v
        node.value = v
    graph._forward_done = True
    out = graph.nodes[-1].idx if output is None else output
    return graph.nodes[out].value


def _input_name(graph: Graph, idx: NodeId) -> str:
    for name, i in graph.input_ids.items():
        if i == idx:
            return name
    raise GraphError(f"node {idx} is not an input")


def backward(graph: Graph, output: NodeId | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar output w.r.t. every parameter.

    Visits each node exactly once in reverse topological order. Parameters
    that do not reach the output get an exactly-zero gradient.
    """
    if not graph._forward_done:
        raise BackwardBeforeForwardError("backward() requires a completed forward_eval()")
    out = graph.nodes[-1].idx if output is None else output
    out_val = graph.nodes[out].value
    if out_val is None:
        raise BackwardBeforeForwardError("output node has no cached value")
    if out_val.size != 1:
        raise GraphError(f"backward output must be scalar, node {out} has shape {out_val.shape}")

    adj: list[np.ndarray | None] = [None] * len(graph.nodes)
    adj[out] = np.ones_like(out_val)

    def acc(i: NodeId, g: np.ndarray) -> None:
        if adj[i] is None:
            adj[i] = g.copy()
        else:
            adj[i] += g

    for node in reversed(graph.nodes[:out + 1]):
        g = adj[node.idx]
        # Leaves have no inputs; stop_gradient blocks by definition.
        if g is None or node.op in ("param", "input", "const", "stop_gradient"):
            continue
        ins = node.inputs
        vals = [graph.nodes[i].value for i in ins]
        y = node.value
        if node.op == "matmul":
            a, b = vals
            if b.ndim == 1:
                acc(ins[0], np.outer(g, b))
                acc(ins[1], a.T @ g)
            else:
                acc(ins[0], g @ b.T)
                acc(ins[1], a.T @ g)
        elif node.op == "add":
            acc(ins[0], g)
            acc(ins[1], g)
        elif node.op == "mul":
            acc(ins[0], g * vals[1])
            acc(ins[1], g * vals[0])
        elif node.op == "concat":
            ofs = 0
            for i, v in zip(ins, vals):
                acc(i, g[ofs:ofs + v.shape[0]])
                ofs += v.shape[0]
        elif node.op == "slice":
            full = np.zeros_like(vals[0])
            full[node.attrs["start"]:node.attrs["stop"]] = g
            acc(ins[0], full)
        elif node.op == "sigmoid":
            acc(ins[0], g * y * (1.0 - y))
        elif node.op == "tanh":
            acc(ins[0], g * (1.0 - y * y))
        elif node.op == "softmax":
            acc(ins[0], y * (g - np.dot(g, y)))
        elif node.op == "log":
            acc(ins[0], g / vals[0])
        elif node.op == "mean":
            acc(ins[0], np.full_like(vals[0], float(g) / vals[0].size))
        elif node.op == "sum":
            acc(ins[0], np.full_like(vals[0], float(g)))
        else:
            raise GraphError(f"no backward rule for op {node.op!r}")

    grads: dict[str, np.ndarray] = {}
    for idx, name in graph.param_names.items():
        g = adj[idx]
        grads[name] = g if g is not None else np.zeros_like(graph.param_arrays[idx])
    return grads


def grad_check(graph: Graph, tolerance: float = 1e-6, *,
               inputs: Mapping[str, np.ndarray] | None = None,
               output: NodeId | None = None, step: float = 1e-5,
               skip: Iterable[str] = ()) -> GradCheckReport:
    """Compare autodiff gradients against central finite differences.

    Parameters are perturbed in place elementwise with the given step and
    restored afterwards. `skip` names parameters whose gradient path is
    intentionally blocked (finite differences measure the true forward
    dependence, which stop_gradient deliberately hides from autodiff).

    Each parameter's error is the norm-relative deviation
    ||g_ad - g_fd|| / max(1e-12, ||g_fd||). Entrywise ratios would divide
    finite-difference roundoff by near-zero entries and report numerical
    noise rather than gradient correctness.
    """
    skipset = set(skip)
    forward_eval(graph, inputs, output)
    ad = backward(graph, output)

    def scalar() -> float:
        return float(forward_eval(graph, inputs, output))

    errors: dict[str, float] = {}
    for idx, name in graph.param_names.items():
        if name in skipset:
            continue
        arr = graph.param_arrays[idx]
        fd = np.zeros_like(arr)
        flat = arr.reshape(-1)
        fd_flat = fd.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            f_plus = scalar()
            flat[j] = orig - step
            f_minus = scalar()
            flat[j] = orig
            fd_flat[j] = (f_plus - f_minus) / (2.0 * step)
        denom = max(1e-12, float(np.linalg.norm(fd)))
        errors[name] = float(np.linalg.norm(ad[name] - fd)) / denom
    forward_eval(graph, inputs, output)  # restore cached values at the unperturbed point
    return GradCheckReport(errors=errors, tolerance=tolerance)
