"""GIN / GCN graph classifiers: mean-pool readout over the final-layer node
embeddings followed by a linear head.

Graphs are batched as a disjoint union, so message passing is one
gather/scatter over the concatenated edge list and pooling is one scatter
over the node-to-graph index.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, DimensionError, FormatError, TrainingError, UndefinedMetricError
from .graphdata import Dataset, Graph

__all__ = [
    "ModelConfig", "ModelState", "ForwardOutput", "GraphBatch", "make_batch",
    "init_model", "param_tensors", "encode", "forward", "forward_many", "predict_proba",
    "train_model", "save_model", "load_model", "epoch_batches", "validation_score",
]


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "GIN"
    num_layers: int = 3
    hidden_dim: int = 128
    num_classes: int = 2
    feature_dim: int = 7
    seed: int = 41

    def __post_init__(self):
        if self.arch not in ("GIN", "GCN"):
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.num_layers < 1 or self.hidden_dim < 1:
            raise ConfigError("num_layers and hidden_dim must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")


@dataclass
class ModelState:
    config: ModelConfig
    params: Dict[str, np.ndarray]

    @property
    def cls_weight(self) -> np.ndarray:
        """Classifier weights, ``[hidden_dim, num_classes]``."""
        return self.params["cls.w"]

    @property
    def cls_bias(self) -> np.ndarray:
        return self.params["cls.b"]

    def copy(self) -> "ModelState":
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()})


@dataclass
class ForwardOutput:
    node_embeddings: np.ndarray
    pooled: np.ndarray
    logits: np.ndarray
    probs: np.ndarray

    @property
    def predicted_class(self) -> int:
        return int(np.argmax(self.probs))


class GraphBatch:
    """Disjoint union of graphs ready for message passing."""

    def __init__(self, graphs: Sequence[Graph]):
        if not graphs:
            raise DimensionError("empty batch")
        counts = np.array([g.num_nodes for g in graphs], dtype=np.int64)
        if counts.min() < 1:
            raise DimensionError("graphs must have at least one node")
        widths = {g.feature_dim for g in graphs}
        if len(widths) != 1:
            raise DimensionError(f"mixed feature widths in batch: {sorted(widths)}")
        offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
        srcs, dsts = [], []
        for g, off in zip(graphs, offsets):
            s, d = g.directed_edges()
            srcs.append(s + off)
            dsts.append(d + off)
        self.num_graphs = len(graphs)
        self.counts = counts
        self.offsets = offsets
        self.num_nodes = int(counts.sum())
        self.x = np.concatenate([g.features for g in graphs], axis=0)
        self.src = np.concatenate(srcs)
        self.dst = np.concatenate(dsts)
        self.graph_index = np.repeat(np.arange(self.num_graphs), counts)
        self.inv_counts = (1.0 / counts)[:, None]
        self._gcn = None

    @property
    def feature_dim(self) -> int:
        return self.x.shape[1]

    def gcn_edges(self):
        """Self-loop-augmented edges with symmetric normalization weights."""
        if self._gcn is None:
            loops = np.arange(self.num_nodes)
            src = np.concatenate([self.src, loops])
            dst = np.concatenate([self.dst, loops])
            deg = np.bincount(dst, minlength=self.num_nodes).astype(np.float64)
            w = 1.0 / np.sqrt(deg[src] * deg[dst])
            self._gcn = (src, dst, w[:, None])
        return self._gcn

    def split_nodes(self, values: np.ndarray) -> List[np.ndarray]:
        return np.split(values, np.cumsum(self.counts)[:-1])


def make_batch(graphs: Sequence[Graph]) -> GraphBatch:
    return GraphBatch(graphs)


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_model(config: ModelConfig, rng: Optional[np.random.Generator] = None) -> ModelState:
    """Glorot-uniform weights, zero biases, GIN eps = 0."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    params: Dict[str, np.ndarray] = {}
    h = config.hidden_dim
    d_in = config.feature_dim
    for i in range(config.num_layers):
        if config.arch == "GIN":
            params[f"layer{i}.eps"] = np.zeros(1)
            params[f"layer{i}.w1"] = _glorot(rng, d_in, h)
            params[f"layer{i}.b1"] = np.zeros(h)
            params[f"layer{i}.w2"] = _glorot(rng, h, h)
            params[f"layer{i}.b2"] = np.zeros(h)
        else:
            params[f"layer{i}.w"] = _glorot(rng, d_in, h)
            params[f"layer{i}.b"] = np.zeros(h)
        d_in = h
    params["cls.w"] = _glorot(rng, h, config.num_classes)
    params["cls.b"] = np.zeros(config.num_classes)
    return ModelState(config, params)


def param_tensors(state: ModelState) -> Dict[str, dc.Tensor]:
    return {k: dc.Tensor(v, requires_grad=True) for k, v in state.params.items()}


def encode(config: ModelConfig, p: Dict[str, dc.Tensor], batch: GraphBatch):
    """Differentiable forward pass. Returns ``(node_embeddings, pooled, logits)``."""
    if batch.feature_dim != config.feature_dim:
        raise DimensionError(
            f"feature width {batch.feature_dim} != model feature_dim {config.feature_dim}"
        )
    h = dc.Tensor(batch.x)
    n = batch.num_nodes
    for i in range(config.num_layers):
        if config.arch == "GIN":
            agg = dc.scatter_add_rows(dc.gather_rows(h, batch.src), batch.dst, n)
            z = dc.add(dc.mul(h, dc.add(p[f"layer{i}.eps"], 1.0)), agg)
            z = dc.relu(dc.add(dc.matmul(z, p[f"layer{i}.w1"]), p[f"layer{i}.b1"]))
            h = dc.relu(dc.add(dc.matmul(z, p[f"layer{i}.w2"]), p[f"layer{i}.b2"]))
        else:
            src, dst, w = batch.gcn_edges()
            hw = dc.matmul(h, p[f"layer{i}.w"])
            msg = dc.mul(dc.gather_rows(hw, src), w)
            h = dc.relu(dc.add(dc.scatter_add_rows(msg, dst, n), p[f"layer{i}.b"]))
    pooled = dc.mul(dc.scatter_add_rows(h, batch.graph_index, batch.num_graphs), batch.inv_counts)
    logits = dc.add(dc.matmul(pooled, p["cls.w"]), p["cls.b"])
    return h, pooled, logits


def _const_tensors(state: ModelState) -> Dict[str, dc.Tensor]:
    return {k: dc.Tensor(v) for k, v in state.params.items()}


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(state: ModelState, graph: Graph) -> ForwardOutput:
    return forward_many(state, [graph])[0]


def forward_many(state: ModelState, graphs: Sequence[Graph], chunk: int = 256) -> List[ForwardOutput]:
    outs: List[ForwardOutput] = []
    for start in range(0, len(graphs), chunk):
        batch = GraphBatch(graphs[start:start + chunk])
        h, pooled, logits = encode(state.config, _const_tensors(state), batch)
        probs = _softmax(logits.value)
        for i, emb in enumerate(batch.split_nodes(h.value)):
            outs.append(ForwardOutput(emb, pooled.value[i], logits.value[i], probs[i]))
    return outs


def predict_proba(state: ModelState, graphs: Sequence[Graph], chunk: int = 256) -> np.ndarray:
    if not len(graphs):
        return np.zeros((0, state.config.num_classes))
    rows = []
    for start in range(0, len(graphs), chunk):
        batch = GraphBatch(graphs[start:start + chunk])
        _, _, logits = encode(state.config, _const_tensors(state), batch)
        rows.append(_softmax(logits.value))
    return np.concatenate(rows, axis=0)


def epoch_batches(rng: np.random.Generator, n: int, batch_size: int) -> List[np.ndarray]:
    """One epoch of shuffled index batches; the last one may be short."""
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def validation_score(state: ModelState, val: Dataset) -> float:
    """Binary AUC on class-1 probability; accuracy if ``val`` is single-class."""
    from .metrics import roc_auc

    probs = predict_proba(state, val.graphs)
    labels = val.labels
    try:
        return roc_auc(probs[:, 1], labels)
    except UndefinedMetricError:
        return float(np.mean(probs.argmax(axis=1) == labels))


def train_model(
    config: ModelConfig,
    train: Dataset,
    val: Dataset,
    epochs: int = 200,
    batch_size: int = 64,
    learning_rate: float = 0.001,
    history: Optional[list] = None,
) -> ModelState:
    """Cross-entropy training with Adam; returns the best-validation-AUC checkpoint.

    Ties keep the earliest epoch. ``history`` (if given) receives one
    ``{"epoch", "loss", "val_auc"}`` dict per epoch.
    """
    if not len(train) or not len(val):
        raise ConfigError("train and val must be nonempty")
    if train.feature_dim != config.feature_dim or val.feature_dim != config.feature_dim:
        raise DimensionError("dataset feature width does not match the model")
    init_ss, shuffle_ss = np.random.SeedSequence(config.seed).spawn(2)
    state = init_model(config, np.random.default_rng(init_ss))
    if epochs <= 0:
        return state
    rng = np.random.default_rng(shuffle_ss)
    names = list(state.params)
    adam = dc.AdamState(learning_rate=learning_rate)
    labels = train.labels
    best, best_score = state.copy(), -np.inf
    for epoch in range(epochs):
        losses = []
        for idx in epoch_batches(rng, len(train), batch_size):
            batch = GraphBatch([train.graphs[i] for i in idx])
            p = param_tensors(state)
            with dc.Tape() as tape:
                _, _, logits = encode(config, p, batch)
                loss = dc.cross_entropy(logits, labels[idx])
            if not np.isfinite(loss.value):
                raise TrainingError("non-finite training loss", epoch)
            grads = tape.gradient(loss, [p[k] for k in names])
            new = dc.adam_step([state.params[k] for k in names], grads, adam)
            state = ModelState(config, dict(zip(names, new)))
            losses.append(float(loss.value))
        score = validation_score(state, val)
        if history is not None:
            history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_auc": score})
        if score > best_score:
            best, best_score = state.copy(), score
    return best


# --------------------------------------------------------------------------
# persistence
#
# Layout: MAGIC | u32 version | u32 header length | UTF-8 JSON header |
# float64 little-endian parameter data in header order.

MAGIC = b"GNNSTEAL"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")


def save_model(state: ModelState, path) -> None:
    header = {
        "config": asdict(state.config),
        "params": [[k, list(v.shape)] for k, v in state.params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for v in state.params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_model(path) -> ModelState:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _PREFIX.size:
        raise FormatError("model file truncated (prefix)")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise FormatError("not a model file")
    if version != FORMAT_VERSION:
        raise FormatError(f"model format version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise FormatError("model file truncated (header)")
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
        config = ModelConfig(**header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad model header: {exc}") from exc
    pos = start + hlen
    params = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        end = pos + 8 * count
        if end > len(data):
            raise FormatError("model file truncated (parameters)")
        params[name] = np.frombuffer(data[pos:end], dtype="<f8").astype(np.float64).reshape(shape)
        pos = end
    if pos != len(data):
        raise FormatError("trailing bytes after model parameters")
    return ModelState(config, params)
