"""Learner models: a plain MLP and the dual-encoder + affinity-decoder.

The dual topology encodes two feature groups separately (semantic features
chunked into a sequence, attribute features into a single vector), then runs
a bidirectional GRU over the semantic sequence with both directions
initialized from the attribute encoding. The initial states are trainable
through a decoder-owned offset while a stop_gradient keeps the updates from
reaching the attribute encoder.

Parameters are grouped per layer; each group owns one gradient-scaling slot
in the meta-policy. Arrays are held by reference so graphs rebuilt after an
in-place SGD step see the updated values.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Graph, NodeId

ACTIVATIONS = ("sigmoid", "tanh")


# ---------------------------------------------------------------------------
# Specs (architecture only; weights live on the models / in checkpoints)

@dataclass(frozen=True)
class MlpSpec:
    """Fully connected stack; layer_widths includes input and output sizes."""

    layer_widths: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self) -> None:
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 3:
            raise ValueError("MlpSpec needs at least one hidden layer")
        if any(w <= 0 for w in self.layer_widths):
            raise ValueError("layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def in_width(self) -> int:
        return self.layer_widths[0]

    @property
    def out_width(self) -> int:
        return self.layer_widths[-1]

    def to_json_dict(self) -> dict:
        return {"layer_widths": list(self.layer_widths), "activation": self.activation}

    @classmethod
    def from_json_dict(cls, d: Mapping) -> "MlpSpec":
        return cls(tuple(d["layer_widths"]), d["activation"])


@dataclass(frozen=True)
class DualEncoderSpec:
    """Two encoders: semantic MLP applied per chunk, attribute MLP applied once."""

    semantic_encoder: MlpSpec
    attribute_encoder: MlpSpec
    chunk_size: int
    attribute_trainable: bool = True

    def __post_init__(self) -> None:
        if self.chunk_size <= 0:
            raise ValueError("chunk_size must be positive")
        if self.semantic_encoder.in_width != self.chunk_size:
            raise ValueError("semantic encoder input width must equal chunk_size")

    def to_json_dict(self) -> dict:
        return {"semantic_encoder": self.semantic_encoder.to_json_dict(),
                "attribute_encoder": self.attribute_encoder.to_json_dict(),
                "chunk_size": self.chunk_size,
                "attribute_trainable": self.attribute_trainable}

    @classmethod
    def from_json_dict(cls, d: Mapping) -> "DualEncoderSpec":
        return cls(MlpSpec.from_json_dict(d["semantic_encoder"]),
                   MlpSpec.from_json_dict(d["attribute_encoder"]),
                   int(d["chunk_size"]), bool(d["attribute_trainable"]))


@dataclass(frozen=True)
class AffinityDecoderSpec:
    """Bidirectional GRU sizes plus the linear decoder-state and scoring head.

    hidden_size is H (per direction); the two final states are concatenated
    to width 2H before output_linear maps them to state_size, and the head
    maps the decoder state to head_size outputs (1 for a ranking score, N
    for class logits).
    """

    hidden_size: int
    state_size: int
    head_size: int

    def __post_init__(self) -> None:
        if min(self.hidden_size, self.state_size, self.head_size) <= 0:
            raise ValueError("decoder sizes must be positive")

    def to_json_dict(self) -> dict:
        return {"hidden_size": self.hidden_size, "state_size": self.state_size,
                "head_size": self.head_size}

    @classmethod
    def from_json_dict(cls, d: Mapping) -> "AffinityDecoderSpec":
        return cls(int(d["hidden_size"]), int(d["state_size"]), int(d["head_size"]))


@dataclass(frozen=True)
class ParamGroup:
    """Named set of parameter tensors sharing one gradient-scaling slot."""

    name: str
    tensors: tuple[np.ndarray, ...]
    group_index: int


def glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


@dataclass
class GruCellParams:
    """Gated recurrent cell weights; each matrix is (H, H+D), no biases."""

    w_g1: np.ndarray
    w_g2: np.ndarray
    w: np.ndarray

    def __post_init__(self) -> None:
        h = self.w_g1.shape[0]
        expected = (h, self.w_g1.shape[1])
        for name, m in (("w_g1", self.w_g1), ("w_g2", self.w_g2), ("w", self.w)):
            if m.ndim != 2 or m.shape != expected:
                raise ValueError(f"{name} must have shape {expected}, got {m.shape}")
        if expected[1] <= h:
            raise ValueError("cell matrices must have H+D > H columns")

    @property
    def hidden_size(self) -> int:
        return self.w.shape[0]

    @property
    def input_size(self) -> int:
        return self.w.shape[1] - self.w.shape[0]

    @classmethod
    def init(cls, hidden_size: int, input_size: int,
             rng: np.random.Generator) -> "GruCellParams":
        cols = hidden_size + input_size
        return cls(glorot(rng, hidden_size, cols), glorot(rng, hidden_size, cols),
                   glorot(rng, hidden_size, cols))


# ---------------------------------------------------------------------------
# Graph-bound nodes and the recurrent step

@dataclass(frozen=True)
class GruCellNodes:
    w_g1: NodeId
    w_g2: NodeId
    w: NodeId
    hidden_size: int


def bind_gru(graph: Graph, cell: GruCellParams, name: str) -> GruCellNodes:
    return GruCellNodes(graph.param(cell.w_g1, f"{name}.w_g1"),
                        graph.param(cell.w_g2, f"{name}.w_g2"),
                        graph.param(cell.w, f"{name}.w"),
                        cell.hidden_size)


def gru_step_detailed(graph: Graph, cell: GruCellNodes, h_prev: NodeId,
                      x_t: NodeId) -> tuple[NodeId, NodeId, NodeId, NodeId]:
    """One recurrent step; returns (h_t, g1, g2, h_tilde) node ids.

    g1 = sigmoid(W_G1 [h, x]); g2 = sigmoid(W_G2 [h, x]);
    h_tilde = tanh(W [g2*h, x]); h_t = (1-g1)*h + g1*h_tilde.
    """
    hx = graph.concat(h_prev, x_t)
    g1 = graph.sigmoid(graph.matmul(cell.w_g1, hx))
    g2 = graph.sigmoid(graph.matmul(cell.w_g2, hx))
    h_tilde = graph.tanh(graph.matmul(cell.w, graph.concat(graph.mul(g2, h_prev), x_t)))
    keep = graph.add(graph.const(np.ones(cell.hidden_size)), graph.neg(g1))
    h_t = graph.add(graph.mul(keep, h_prev), graph.mul(g1, h_tilde))
    return h_t, g1, g2, h_tilde


def gru_step(graph: Graph, cell: GruCellNodes, h_prev: NodeId, x_t: NodeId) -> NodeId:
    return gru_step_detailed(graph, cell, h_prev, x_t)[0]


# ---------------------------------------------------------------------------
# MLP model

@dataclass(frozen=True)
class MlpNodes:
    layers: tuple[tuple[NodeId, NodeId], ...]  # (weight, bias) per layer


class MlpModel:
    """Stack of linear layers with the configured activation on hidden layers."""

    def __init__(self, spec: MlpSpec, weights: list[tuple[np.ndarray, np.ndarray]],
                 name: str = "mlp") -> None:
        self.spec = spec
        self.weights = weights
        self.name = name

    @classmethod
    def init(cls, spec: MlpSpec, rng: np.random.Generator, name: str = "mlp") -> "MlpModel":
        weights = []
        for w_in, w_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
            weights.append((glorot(rng, w_out, w_in), np.zeros(w_out)))
        return cls(spec, weights, name)

    def params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, (w, b) in enumerate(self.weights):
            out[f"{self.name}.w{i}"] = w
            out[f"{self.name}.b{i}"] = b
        return out

    def groups(self, start_index: int = 0) -> list[ParamGroup]:
        return [ParamGroup(f"{self.name}.layer{i}", (w, b), start_index + i)
                for i, (w, b) in enumerate(self.weights)]

    def bind(self, graph: Graph) -> MlpNodes:
        layers = tuple((graph.param(w, f"{self.name}.w{i}"),
                        graph.param(b, f"{self.name}.b{i}"))
                       for i, (w, b) in enumerate(self.weights))
        return MlpNodes(layers)

    def forward(self, graph: Graph, nodes: MlpNodes, x: NodeId) -> NodeId:
        act = graph.sigmoid if self.spec.activation == "sigmoid" else graph.tanh
        h = x
        for i, (w, b) in enumerate(nodes.layers):
            h = graph.add(graph.matmul(w, h), b)
            if i < len(nodes.layers) - 1:
                h = act(h)
        return h


# ---------------------------------------------------------------------------
# Dual encoder + affinity decoder

@dataclass(frozen=True)
class DualEncoderNodes:
    semantic: MlpNodes
    attribute: MlpNodes


@dataclass(frozen=True)
class AffinityDecoderNodes:
    gru_fwd: GruCellNodes
    gru_bwd: GruCellNodes
    init_offset: NodeId
    out_w: NodeId
    out_b: NodeId
    head_w: NodeId
    head_b: NodeId


class DualAffinityModel:
    """Dual encoders feeding a bidirectional GRU affinity decoder.

    The attribute encoding initializes both GRU directions through a
    stop_gradient plus a zero-initialized trainable offset shared by the two
    directions, so the initial state trains within the decoder while encoder
    parameters stay untouched by decoder updates.
    """

    def __init__(self, encoder_spec: DualEncoderSpec, decoder_spec: AffinityDecoderSpec,
                 semantic_mlp: MlpModel, attribute_mlp: MlpModel,
                 gru_fwd: GruCellParams, gru_bwd: GruCellParams,
                 init_offset: np.ndarray, out_w: np.ndarray, out_b: np.ndarray,
                 head_w: np.ndarray, head_b: np.ndarray) -> None:
        if encoder_spec.attribute_encoder.out_width != decoder_spec.hidden_size:
            raise ValueError("attribute encoder output width must equal GRU hidden size")
        self.encoder_spec = encoder_spec
        self.decoder_spec = decoder_spec
        self.semantic_mlp = semantic_mlp
        self.attribute_mlp = attribute_mlp
        self.gru_fwd = gru_fwd
        self.gru_bwd = gru_bwd
        self.init_offset = init_offset
        self.out_w = out_w
        self.out_b = out_b
        self.head_w = head_w
        self.head_b = head_b

    @classmethod
    def init(cls, encoder_spec: DualEncoderSpec, decoder_spec: AffinityDecoderSpec,
             rng: np.random.Generator) -> "DualAffinityModel":
        h = decoder_spec.hidden_size
        d = encoder_spec.semantic_encoder.out_width
        return cls(
            encoder_spec, decoder_spec,
            MlpModel.init(encoder_spec.semantic_encoder, rng, "semantic"),
            MlpModel.init(encoder_spec.attribute_encoder, rng, "attribute"),
            GruCellParams.init(h, d, rng), GruCellParams.init(h, d, rng),
            np.zeros(h),
            glorot(rng, decoder_spec.state_size, 2 * h), np.zeros(decoder_spec.state_size),
            glorot(rng, decoder_spec.head_size, decoder_spec.state_size),
            np.zeros(decoder_spec.head_size))

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        out.update(self.semantic_mlp.params())
        out.update(self.attribute_mlp.params())
        for name, cell in (("gru_fwd", self.gru_fwd), ("gru_bwd", self.gru_bwd)):
            out[f"{name}.w_g1"] = cell.w_g1
            out[f"{name}.w_g2"] = cell.w_g2
            out[f"{name}.w"] = cell.w
        out["decoder.init_offset"] = self.init_offset
        out["decoder.out_w"] = self.out_w
        out["decoder.out_b"] = self.out_b
        out["decoder.head_w"] = self.head_w
        out["decoder.head_b"] = self.head_b
        return out

    def groups(self) -> list[ParamGroup]:
        groups = self.semantic_mlp.groups(0)
        groups += self.attribute_mlp.groups(len(groups))
        n = len(groups)
        groups += [
            ParamGroup("gru_fwd", (self.gru_fwd.w_g1, self.gru_fwd.w_g2, self.gru_fwd.w), n),
            ParamGroup("gru_bwd", (self.gru_bwd.w_g1, self.gru_bwd.w_g2, self.gru_bwd.w), n + 1),
            ParamGroup("decoder_init", (self.init_offset,), n + 2),
            ParamGroup("output_linear", (self.out_w, self.out_b), n + 3),
            ParamGroup("head", (self.head_w, self.head_b), n + 4),
        ]
        return groups

    def bind(self, graph: Graph) -> tuple[DualEncoderNodes, AffinityDecoderNodes]:
        enc = DualEncoderNodes(self.semantic_mlp.bind(graph), self.attribute_mlp.bind(graph))
        dec = AffinityDecoderNodes(
            bind_gru(graph, self.gru_fwd, "gru_fwd"),
            bind_gru(graph, self.gru_bwd, "gru_bwd"),
            graph.param(self.init_offset, "decoder.init_offset"),
            graph.param(self.out_w, "decoder.out_w"),
            graph.param(self.out_b, "decoder.out_b"),
            graph.param(self.head_w, "decoder.head_w"),
            graph.param(self.head_b, "decoder.head_b"))
        return enc, dec

    def dual_encode(self, graph: Graph, enc: DualEncoderNodes, semantic: np.ndarray,
                    attributes: np.ndarray) -> tuple[list[NodeId], NodeId]:
        return dual_encode(graph, self, enc, semantic, attributes)

    def score(self, graph: Graph, semantic: np.ndarray, attributes: np.ndarray,
              *, block_initial_state: bool = True,
              bound: tuple[DualEncoderNodes, AffinityDecoderNodes] | None = None) -> NodeId:
        enc, dec = bound if bound is not None else self.bind(graph)
        seq, attr_enc = self.dual_encode(graph, enc, semantic, attributes)
        return affinity_decode(graph, dec, seq, attr_enc,
                               block_initial_state=block_initial_state)


def dual_encode(graph: Graph, model: DualAffinityModel, enc: DualEncoderNodes,
                semantic: np.ndarray, attributes: np.ndarray) -> tuple[list[NodeId], NodeId]:
    """Chunk and encode the semantic vector; encode attributes to one H-vector.

    With attribute_trainable=False the attribute encoding is wrapped in
    stop_gradient so the attribute encoder can never receive gradient from
    any consumer.
    """
    spec = model.encoder_spec
    semantic = np.asarray(semantic, dtype=np.float64).reshape(-1)
    if semantic.size == 0 or semantic.size % spec.chunk_size != 0:
        raise ValueError(
            f"semantic length {semantic.size} not divisible by chunk_size {spec.chunk_size}")
    seq = []
    for ofs in range(0, semantic.size, spec.chunk_size):
        chunk = graph.const(semantic[ofs:ofs + spec.chunk_size])
        seq.append(model.semantic_mlp.forward(graph, enc.semantic, chunk))
    attr = graph.const(np.asarray(attributes, dtype=np.float64).reshape(-1))
    attr_enc = model.attribute_mlp.forward(graph, enc.attribute, attr)
    if not spec.attribute_trainable:
        attr_enc = graph.stop_gradient(attr_enc)
    return seq, attr_enc


def affinity_decode(graph: Graph, dec: AffinityDecoderNodes, semantic_seq: Sequence[NodeId],
                    attribute_enc: NodeId, *, block_initial_state: bool = True) -> NodeId:
    """Run both GRU directions from the attribute-initialized state; score.

    block_initial_state=True is the trained configuration (stop_gradient at
    the encoder boundary); False exists for gradient checking the full
    forward dependence and as a negative control.
    """
    if len(semantic_seq) == 0:
        raise ValueError("affinity_decode needs a non-empty semantic sequence")
    init_src = graph.stop_gradient(attribute_enc) if block_initial_state else attribute_enc
    h0 = graph.add(init_src, dec.init_offset)
    h_fwd = h0
    for x in semantic_seq:
        h_fwd = gru_step(graph, dec.gru_fwd, h_fwd, x)
    h_bwd = h0
    for x in reversed(semantic_seq):
        h_bwd = gru_step(graph, dec.gru_bwd, h_bwd, x)
    state = graph.add(graph.matmul(dec.out_w, graph.concat(h_fwd, h_bwd)), dec.out_b)
    return graph.add(graph.matmul(dec.head_w, state), dec.head_b)


# ---------------------------------------------------------------------------
# Parameter persistence

CHECKPOINT_DTYPE = "<f8"  # 64-bit little-endian floats


def copy_params(params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


def assign_params(params: Mapping[str, np.ndarray], source: Mapping[str, np.ndarray]) -> None:
    """Copy `source` values into `params` arrays in place (same keys/shapes)."""
    if set(params) != set(source):
        raise ValueError("parameter sets differ")
    for k, arr in params.items():
        src = source[k]
        if arr.shape != src.shape:
            raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {src.shape}")
        arr[...] = src


def save_checkpoint(directory: str | Path, params: Mapping[str, np.ndarray],
                    prefix: str = "params") -> tuple[Path, Path]:
    """Write <prefix>.bin (flat little-endian float64) and <prefix>.json manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = sorted(params)
    flat = np.concatenate([np.asarray(params[n], dtype=np.float64).reshape(-1)
                           for n in names]) if names else np.zeros(0)
    bin_path = directory / f"{prefix}.bin"
    bin_path.write_bytes(flat.astype(CHECKPOINT_DTYPE).tobytes())
    manifest = {"format_version": 1, "dtype": CHECKPOINT_DTYPE,
                "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names]}
    manifest_path = directory / f"{prefix}.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return bin_path, manifest_path


def load_checkpoint(directory: str | Path, prefix: str = "params") -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = json.loads((directory / f"{prefix}.json").read_text())
    if manifest.get("format_version") != 1:
        raise ValueError(f"unsupported checkpoint format_version {manifest.get('format_version')}")
    flat = np.frombuffer((directory / f"{prefix}.bin").read_bytes(),
                         dtype=manifest["dtype"]).astype(np.float64)
    out: dict[str, np.ndarray] = {}
    ofs = 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        out[entry["name"]] = flat[ofs:ofs + size].reshape(shape).copy()
        ofs += size
    if ofs != flat.size:
        raise ValueError("checkpoint payload length does not match manifest")
    return out
