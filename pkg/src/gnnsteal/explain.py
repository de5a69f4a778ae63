"""Node-importance explanations: Graph-CAM, gradient norm, Grad-CAM, and the
edge-score to node-score conversion for edge-level explainers."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from . import diffcore as dc
from .gnnmodel import ForwardOutput, GraphBatch, ModelState, encode, forward
from .graphdata import Graph

__all__ = [
    "ExplanationVector", "METHODS", "graph_cam", "grad_explain", "grad_cam",
    "edges_to_node_scores", "explain",
]

METHODS = ("GraphCAM", "Grad", "GradCAM")


@dataclass
class ExplanationVector:
    scores: np.ndarray
    class_used: int
    method: str

    def __len__(self):
        return len(self.scores)

    def restrict(self, keep) -> "ExplanationVector":
        return ExplanationVector(self.scores[np.asarray(keep, dtype=np.int64)], self.class_used, self.method)


def _check_class(state: ModelState, class_c) -> int:
    c = int(class_c)
    if not 0 <= c < state.config.num_classes:
        raise IndexError(f"class {c} outside [0, {state.config.num_classes})")
    return c


def graph_cam(fwd: ForwardOutput, state: ModelState, class_c) -> ExplanationVector:
    """Project final-layer node embeddings onto the classifier column of ``class_c``."""
    c = _check_class(state, class_c)
    scores = fwd.node_embeddings @ state.cls_weight[:, c]
    return ExplanationVector(scores, c, "GraphCAM")


def _class_score_grad(state: ModelState, graph: Graph, c: int):
    """Final-layer embeddings and d(logit_c)/d(embeddings), one reverse pass."""
    p = {k: dc.Tensor(v, requires_grad=True) for k, v in state.params.items()}
    with dc.Tape() as tape:
        h, _, logits = encode(state.config, p, GraphBatch([graph]))
        y_c = dc.sum_all(dc.mul(logits, np.eye(state.config.num_classes)[c]))
    (grad,) = tape.gradient(y_c, [h])
    return h.value, grad


def grad_explain(state: ModelState, graph: Graph, class_c) -> ExplanationVector:
    """Euclidean norm of the positive part of d(y_c)/d(final node embedding)."""
    c = _check_class(state, class_c)
    _, grad = _class_score_grad(state, graph, c)
    return ExplanationVector(np.linalg.norm(np.maximum(grad, 0.0), axis=1), c, "Grad")


def grad_cam(state: ModelState, graph: Graph, class_c) -> ExplanationVector:
    """ReLU of embeddings weighted by node-averaged gradients of y_c."""
    c = _check_class(state, class_c)
    feats, grad = _class_score_grad(state, graph, c)
    alpha = grad.mean(axis=0)
    return ExplanationVector(np.maximum(feats @ alpha, 0.0), c, "GradCAM")


def edges_to_node_scores(edge_scores: Dict[Tuple[int, int], float], graph: Graph) -> ExplanationVector:
    """Average each node's incident edge scores; isolated nodes get 0.

    Keys may be given in either orientation. A node's neighbourhood is the
    graph's own adjacency, so every incident edge must be scored.
    """
    known = {(int(u), int(v)) for u, v in graph.edges.tolist()}
    canon: Dict[Tuple[int, int], float] = {}
    for (u, v), s in edge_scores.items():
        key = (min(u, v), max(u, v))
        if key not in known:
            raise KeyError(f"edge {(u, v)} not in graph")
        canon[key] = float(s)
    total = np.zeros(graph.num_nodes)
    count = np.zeros(graph.num_nodes)
    for (u, v) in known:
        if (u, v) not in canon:
            raise KeyError(f"edge {(u, v)} has no score")
        s = canon[(u, v)]
        total[[u, v]] += s
        count[[u, v]] += 1
    scores = np.divide(total, count, out=np.zeros(graph.num_nodes), where=count > 0)
    return ExplanationVector(scores, -1, "External")


def explain(state: ModelState, graph: Graph, method: str = "GraphCAM", fwd: ForwardOutput = None):
    """Explain the model's predicted class with ``method``. Returns ``(fwd, explanation)``."""
    if fwd is None:
        fwd = forward(state, graph)
    c = fwd.predicted_class
    if method == "GraphCAM":
        return fwd, graph_cam(fwd, state, c)
    if method == "Grad":
        return fwd, grad_explain(state, graph, c)
    if method == "GradCAM":
        return fwd, grad_cam(state, graph, c)
    raise ValueError(f"unknown explainer {method!r}")
