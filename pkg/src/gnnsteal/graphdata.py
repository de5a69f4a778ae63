"""Graph containers, TU-format ingestion, the synthetic motif generator,
deterministic splitting and feature padding.

All randomness goes through ``numpy.random.Generator`` backed by PCG64
(``numpy.random.default_rng``), so a given seed yields the same shuffles on
every platform numpy supports.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, FormatError, IngestionError

__all__ = [
    "Graph",
    "Dataset",
    "SplitSpec",
    "make_graph",
    "load_tu_dataset",
    "write_tu_dataset",
    "generate_motif_dataset",
    "split",
    "pad_features",
    "NUM_ATOM_TYPES",
]

NUM_ATOM_TYPES = 7


def _normalize_edges(edges, num_nodes: int) -> np.ndarray:
    arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if arr.size and (arr.min() < 0 or arr.max() >= num_nodes):
        raise FormatError(f"edge endpoint outside [0, {num_nodes})")
    arr = arr[arr[:, 0] != arr[:, 1]]
    arr = np.sort(arr, axis=1)
    if len(arr):
        arr = np.unique(arr, axis=0)
    return arr.reshape(-1, 2)


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected graph with dense node features.

    ``edges`` is an ``(m, 2)`` int array with ``u < v`` per row, sorted and
    deduplicated. Use :func:`make_graph` to build one from raw input.
    ``motif_nodes`` is generator metadata (planted motif positions) and is
    not part of the graph proper.
    """

    num_nodes: int
    edges: np.ndarray
    features: np.ndarray
    label: Optional[int] = None
    motif_nodes: Optional[tuple] = None

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.num_nodes:
            raise DimensionError(
                f"features shape {self.features.shape} does not match {self.num_nodes} nodes"
            )

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def directed_edges(self):
        """Both orientations of every edge as ``(src, dst)`` index arrays."""
        if not len(self.edges):
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty
        u, v = self.edges[:, 0], self.edges[:, 1]
        return np.concatenate([u, v]), np.concatenate([v, u])

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_nodes, dtype=np.int64)
        np.add.at(deg, self.edges.ravel(), 1)
        return deg

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        if len(self.edges):
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
            a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def permute(self, perm: Sequence[int]) -> "Graph":
        """Relabel nodes so that old node ``perm[i]`` becomes new node ``i``."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        motif = None
        if self.motif_nodes is not None:
            motif = tuple(sorted(int(inv[v]) for v in self.motif_nodes))
        return make_graph(
            self.num_nodes, inv[self.edges] if len(self.edges) else self.edges,
            self.features[perm], self.label, motif,
        )

    def to_wire(self) -> dict:
        return {
            "num_nodes": int(self.num_nodes),
            "edges": self.edges.tolist(),
            "features": self.features.tolist(),
        }

    @classmethod
    def from_wire(cls, obj: dict) -> "Graph":
        try:
            n = int(obj["num_nodes"])
            feats = np.asarray(obj["features"], dtype=np.float64).reshape(n, -1)
            return make_graph(n, obj.get("edges", []), feats)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad graph payload: {exc}") from exc


def make_graph(num_nodes, edges, features, label=None, motif_nodes=None) -> Graph:
    """Build a :class:`Graph`, symmetrizing/deduplicating edges and dropping self-loops."""
    num_nodes = int(num_nodes)
    feats = np.array(features, dtype=np.float64, copy=True)
    if feats.ndim == 1 and num_nodes == 0:
        feats = feats.reshape(0, 0)
    return Graph(
        num_nodes=num_nodes,
        edges=_freeze(_normalize_edges(edges, num_nodes)),
        features=_freeze(feats),
        label=None if label is None else int(label),
        motif_nodes=None if motif_nodes is None else tuple(int(v) for v in motif_nodes),
    )


@dataclass(frozen=True, eq=False)
class Dataset:
    graphs: tuple
    num_classes: int
    feature_dim: int
    name: str = "dataset"

    def __post_init__(self):
        object.__setattr__(self, "graphs", tuple(self.graphs))
        if self.num_classes < 2:
            raise ConfigError("a dataset needs at least two classes")
        for g in self.graphs:
            if g.feature_dim != self.feature_dim:
                raise DimensionError(
                    f"graph feature width {g.feature_dim} != dataset width {self.feature_dim}"
                )
            if g.label is not None and not 0 <= g.label < self.num_classes:
                raise ConfigError(f"label {g.label} outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.graphs)

    def __getitem__(self, i):
        return self.graphs[i]

    def __iter__(self):
        return iter(self.graphs)

    @property
    def labels(self) -> np.ndarray:
        return np.array([g.label for g in self.graphs], dtype=np.int64)

    def subset(self, indices: Iterable[int], name: Optional[str] = None) -> "Dataset":
        return Dataset(
            tuple(self.graphs[i] for i in indices), self.num_classes, self.feature_dim,
            name or self.name,
        )


@dataclass(frozen=True)
class SplitSpec:
    target_train_frac: float = 0.40
    shadow_frac: float = 0.40
    test_frac: float = 0.20
    val_within_target_frac: float = 0.20
    seed: int = 41

    def __post_init__(self):
        total = self.target_train_frac + self.shadow_frac + self.test_frac
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"split fractions sum to {total}, expected 1.0")
        if min(self.target_train_frac, self.shadow_frac, self.test_frac) < 0:
            raise ConfigError("split fractions must be nonnegative")
        if not 0.0 <= self.val_within_target_frac < 1.0:
            raise ConfigError("val_within_target_frac must lie in [0, 1)")


# --------------------------------------------------------------------------
# TU text format

_TU_FILES = ("A", "graph_indicator", "graph_labels", "node_labels")


def _read_int_lines(path):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append((lineno, [int(tok) for tok in line.replace(",", " ").split()]))
            except ValueError:
                raise FormatError(f"{os.path.basename(path)}:{lineno}: not an integer row") from None
    return rows


def load_tu_dataset(directory, name: str, feature_dim: Optional[int] = None) -> Dataset:
    """Load ``{name}_A.txt`` & co. from ``directory``.

    Node labels become one-hot features of width ``max_label + 1`` (or
    ``feature_dim`` when given, which must be large enough). Graph labels are
    remapped to contiguous 0-based classes in sorted order.
    """
    paths = {key: os.path.join(directory, f"{name}_{key}.txt") for key in _TU_FILES}
    for key, path in paths.items():
        if not os.path.isfile(path):
            raise IngestionError(f"missing TU file: {os.path.basename(path)}")

    indicator = [(ln, row[0]) for ln, row in _read_int_lines(paths["graph_indicator"])]
    num_total = len(indicator)
    graph_of = np.array([g for _, g in indicator], dtype=np.int64)
    graph_label_rows = _read_int_lines(paths["graph_labels"])
    raw_labels = [row[0] for _, row in graph_label_rows]
    num_graphs = len(raw_labels)
    if num_total and (graph_of.min() < 1 or graph_of.max() > num_graphs):
        bad = next(ln for ln, g in indicator if g < 1 or g > num_graphs)
        raise FormatError(f"{name}_graph_indicator.txt:{bad}: graph id outside 1..{num_graphs}")
    if num_total > 1 and np.any(np.diff(graph_of) < 0):
        raise FormatError(f"{name}_graph_indicator.txt: node ids are not grouped by graph")

    node_rows = _read_int_lines(paths["node_labels"])
    if len(node_rows) != num_total:
        raise FormatError(
            f"{name}_node_labels.txt has {len(node_rows)} rows, indicator declares {num_total} nodes"
        )
    node_labels = np.array([row[0] for _, row in node_rows], dtype=np.int64)
    if num_total and node_labels.min() < 0:
        raise FormatError(f"{name}_node_labels.txt: negative node label")
    width = int(node_labels.max()) + 1 if num_total else 0
    if feature_dim is not None:
        if feature_dim < width:
            raise DimensionError(f"feature_dim {feature_dim} < node label width {width}")
        width = feature_dim

    # first 0-based global node index of each graph
    counts = np.bincount(graph_of - 1, minlength=num_graphs)
    offsets = np.concatenate([[0], np.cumsum(counts)])

    per_graph_edges = [[] for _ in range(num_graphs)]
    for lineno, row in _read_int_lines(paths["A"]):
        if len(row) != 2:
            raise FormatError(f"{name}_A.txt:{lineno}: expected 2 columns")
        u, v = row[0] - 1, row[1] - 1
        if not (0 <= u < num_total and 0 <= v < num_total):
            raise FormatError(
                f"{name}_A.txt:{lineno}: node index outside 1..{num_total}"
            )
        gu, gv = graph_of[u] - 1, graph_of[v] - 1
        if gu != gv:
            raise FormatError(f"{name}_A.txt:{lineno}: edge joins different graphs")
        per_graph_edges[gu].append((u - offsets[gu], v - offsets[gu]))

    classes = sorted(set(raw_labels))
    remap = {c: i for i, c in enumerate(classes)}
    graphs = []
    for gi in range(num_graphs):
        n = int(counts[gi])
        feats = np.zeros((n, width))
        feats[np.arange(n), node_labels[offsets[gi]:offsets[gi + 1]]] = 1.0
        graphs.append(make_graph(n, per_graph_edges[gi], feats, remap[raw_labels[gi]]))
    return Dataset(tuple(graphs), max(len(classes), 2), width, name)


def write_tu_dataset(dataset: Dataset, directory, name: str) -> None:
    """Export ``dataset`` in TU text layout. Features must be one-hot rows."""
    os.makedirs(directory, exist_ok=True)
    offset = 0
    with open(os.path.join(directory, f"{name}_A.txt"), "w") as fa, \
            open(os.path.join(directory, f"{name}_graph_indicator.txt"), "w") as fi, \
            open(os.path.join(directory, f"{name}_graph_labels.txt"), "w") as fl, \
            open(os.path.join(directory, f"{name}_node_labels.txt"), "w") as fn:
        for gi, g in enumerate(dataset.graphs, start=1):
            row_sums = g.features.sum(axis=1)
            if g.num_nodes and not (np.all(row_sums == 1.0) and np.all((g.features == 0) | (g.features == 1))):
                raise FormatError("TU export needs one-hot node features")
            for lab in g.features.argmax(axis=1) if g.num_nodes else []:
                fn.write(f"{int(lab)}\n")
                fi.write(f"{gi}\n")
            src, dst = g.directed_edges()
            for u, v in sorted(zip(src.tolist(), dst.tolist())):
                fa.write(f"{u + offset + 1}, {v + offset + 1}\n")
            fl.write(f"{int(g.label) if g.label is not None else 0}\n")
            offset += g.num_nodes


# --------------------------------------------------------------------------
# synthetic planted-motif graphs

# Base nodes favour the first types, motif nodes the last ones.
BASE_TYPE_PROBS = np.array([0.30, 0.25, 0.20, 0.10, 0.07, 0.05, 0.03])
MOTIF_TYPE_PROBS = np.array([0.03, 0.05, 0.07, 0.10, 0.20, 0.25, 0.30])


def _motif_edges(kind: str, nodes):
    if kind == "cycle":
        k = len(nodes)
        return [(nodes[i], nodes[(i + 1) % k]) for i in range(k)]
    return [(a, b) for i, a in enumerate(nodes) for b in nodes[i + 1:]]


def generate_motif_dataset(
    n_graphs: int,
    seed: int,
    edge_prob: float = 0.2,
    min_base: int = 10,
    max_base: int = 20,
    name: str = "motif",
) -> Dataset:
    """Erdős–Rényi base graphs with one planted motif each.

    Class 1 carries a 5-cycle, class 0 a 4-clique. The motif is attached to
    the base graph through a single edge and node order is shuffled. Node
    features are one-hot atom types over ``NUM_ATOM_TYPES`` categories, with
    motif nodes drawn from a different type distribution than base nodes.
    """
    if n_graphs < 2:
        raise ConfigError("n_graphs must be at least 2")
    rng = np.random.default_rng(seed)
    labels = np.arange(n_graphs) % 2
    rng.shuffle(labels)
    graphs = []
    for label in labels:
        n_base = int(rng.integers(min_base, max_base + 1))
        iu, ju = np.triu_indices(n_base, k=1)
        keep = rng.random(len(iu)) < edge_prob
        edges = list(zip(iu[keep].tolist(), ju[keep].tolist()))
        k = 5 if label == 1 else 4
        motif = list(range(n_base, n_base + k))
        edges += _motif_edges("cycle" if label == 1 else "clique", motif)
        edges.append((int(rng.integers(n_base)), motif[int(rng.integers(k))]))
        n = n_base + k
        types = np.concatenate([
            rng.choice(NUM_ATOM_TYPES, size=n_base, p=BASE_TYPE_PROBS),
            rng.choice(NUM_ATOM_TYPES, size=k, p=MOTIF_TYPE_PROBS),
        ])
        feats = np.zeros((n, NUM_ATOM_TYPES))
        feats[np.arange(n), types] = 1.0
        g = make_graph(n, edges, feats, int(label), motif)
        graphs.append(g.permute(rng.permutation(n)))
    return Dataset(tuple(graphs), 2, NUM_ATOM_TYPES, name)


# --------------------------------------------------------------------------
# splitting and padding

def split(dataset: Dataset, spec: SplitSpec):
    """Shuffle with PCG64(spec.seed) and cut into target-train, target-val, shadow, test.

    Target and shadow sizes are floored, the remainder goes to test; the
    validation part is the floored fraction of the target portion.
    """
    n = len(dataset)
    if n == 0:
        raise ConfigError("cannot split an empty dataset")
    order = np.random.default_rng(spec.seed).permutation(n)
    n_target = int(np.floor(spec.target_train_frac * n + 1e-9))
    n_shadow = int(np.floor(spec.shadow_frac * n + 1e-9))
    n_val = int(np.floor(spec.val_within_target_frac * n_target + 1e-9))
    n_train = n_target - n_val
    n_test = n - n_target - n_shadow
    sizes = {"target_train": n_train, "target_val": n_val, "shadow": n_shadow, "test": n_test}
    empty = [k for k, v in sizes.items() if v <= 0]
    if empty:
        raise ConfigError(f"split leaves empty parts: {', '.join(empty)}")
    cuts = np.cumsum([n_train, n_val, n_shadow])
    parts = np.split(order, cuts)
    names = ("target_train", "target_val", "shadow", "test")
    return tuple(dataset.subset(idx.tolist(), f"{dataset.name}/{nm}") for idx, nm in zip(parts, names))


def pad_features(dataset: Dataset, target_dim: int) -> Dataset:
    """Right-pad every feature row with zeros up to ``target_dim`` columns."""
    d = dataset.feature_dim
    if target_dim < d:
        raise DimensionError(f"cannot pad {d}-dim features down to {target_dim}")
    if target_dim == d:
        return dataset
    graphs = []
    for g in dataset.graphs:
        feats = np.zeros((g.num_nodes, target_dim))
        feats[:, :d] = g.features
        graphs.append(replace(g, features=_freeze(feats)))
    return Dataset(tuple(graphs), dataset.num_classes, target_dim, dataset.name)
