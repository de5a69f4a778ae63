"""Explanation-guided model stealing.

Phase 1 spends the query budget on shadow graphs and multiplies every answer
into extra samples by perturbing only the low-importance ("style") part of
the graph; those samples inherit the queried label and the restricted
explanation, so they cost no budget. Phase 2 trains a surrogate on
cross-entropy plus a pairwise ranking loss that makes its Graph-CAM node
ordering agree with the target's explanation.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import diffcore as dc
from .errors import BudgetExhausted, ConfigError, DimensionError, TrainingError
from .explain import ExplanationVector
from .gnnmodel import (
    GraphBatch, ModelConfig, ModelState, encode, epoch_batches, init_model, param_tensors,
)
from .graphdata import Dataset, Graph, make_graph
from .oracle import QueryRecord

__all__ = [
    "AttackConfig", "StylePlan", "AugmentedSample", "AttackError", "select_style_nodes",
    "augment_node_drop", "augment_edge_perturb", "collect_training_set",
    "rank_alignment_loss", "mse_alignment_loss", "train_surrogate", "train_teacher_student",
    "dump_training_set", "load_training_set",
]

log = logging.getLogger(__name__)

ALIGN_MODES = ("Rank", "MSE", "None")


class AttackError(RuntimeError):
    """Phase 1 could not complete (e.g. the oracle refused a budgeted query)."""


@dataclass(frozen=True)
class AttackConfig:
    alpha: float = 0.2
    beta: float = 0.5
    k_augments: int = 2
    edge_perturb_prob: float = 0.1
    lam: float = 1.0
    align_mode: str = "Rank"
    augment: bool = True
    surrogate: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 200
    batch_size: int = 64
    seed: int = 41
    learning_rate: float = 0.001
    soft_labels: bool = True
    max_pairs: Optional[int] = None

    def __post_init__(self):
        for name in ("alpha", "beta", "edge_perturb_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.align_mode not in ALIGN_MODES:
            raise ConfigError(f"align_mode must be one of {ALIGN_MODES}")
        if self.k_augments < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("k_augments, batch_size and epochs must be nonnegative (batch >= 1)")

    def with_method(self, method: str) -> "AttackConfig":
        """Preset for one row of the method/ablation lattice."""
        presets = {
            "full": dict(align_mode="Rank", augment=True),
            "TS": dict(align_mode="None", augment=False),
            "MSE-align": dict(align_mode="MSE", augment=False),
            "no-aug": dict(align_mode="Rank", augment=False),
            "no-align": dict(align_mode="None", augment=True),
        }
        if method not in presets:
            raise ConfigError(f"unknown method {method!r}")
        return replace(self, **presets[method])


@dataclass
class StylePlan:
    style_nodes: np.ndarray
    causal_nodes: np.ndarray


@dataclass
class AugmentedSample:
    graph: Graph
    label: int
    explanation: ExplanationVector
    origin: int
    probs: Optional[np.ndarray] = None
    kind: str = "node_drop"
    kept: Optional[np.ndarray] = None  # origin indices of surviving nodes (node drop only)


# --------------------------------------------------------------------------
# Phase 1: style selection and augmentation

def _scores(expl) -> np.ndarray:
    return np.asarray(getattr(expl, "scores", expl), dtype=np.float64)


def select_style_nodes(explanation, alpha: float) -> StylePlan:
    """The ``floor(alpha * n)`` lowest-scoring nodes; ties go to the lower index."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError("alpha must lie in [0, 1]")
    scores = _scores(explanation)
    n = len(scores)
    k = int(np.floor(alpha * n + 1e-9))
    order = np.lexsort((np.arange(n), scores))
    style = np.sort(order[:k])
    causal = np.sort(order[k:])
    return StylePlan(style, causal)


def augment_node_drop(record: QueryRecord, plan: StylePlan, beta: float, rng,
                      origin: int = -1) -> Optional[AugmentedSample]:
    """Remove ``floor(beta * |V_S|)`` random style nodes.

    Survivors keep their relative order; the explanation is restricted to
    them. Returns None (and logs a warning) when nothing would survive.
    """
    g = record.graph
    n_drop = int(np.floor(beta * len(plan.style_nodes) + 1e-9))
    if g.num_nodes - n_drop < 1:
        log.warning("node drop would empty graph %d; skipped", origin)
        return None
    dropped = rng.choice(plan.style_nodes, size=n_drop, replace=False) if n_drop else np.zeros(0, np.int64)
    keep_mask = np.ones(g.num_nodes, dtype=bool)
    keep_mask[dropped] = False
    keep = np.flatnonzero(keep_mask)
    new_index = np.full(g.num_nodes, -1, dtype=np.int64)
    new_index[keep] = np.arange(len(keep))
    edges = g.edges
    if len(edges):
        ok = keep_mask[edges[:, 0]] & keep_mask[edges[:, 1]]
        edges = new_index[edges[ok]]
    graph = make_graph(len(keep), edges, g.features[keep], record.predicted_label)
    return AugmentedSample(graph, record.predicted_label, record.explanation.restrict(keep),
                           origin, record.probs, "node_drop", keep)


def augment_edge_perturb(record: QueryRecord, plan: StylePlan, p: float, rng,
                         origin: int = -1) -> AugmentedSample:
    """Flip each node pair inside ``V_S`` with probability ``p``.

    Existing edges are removed and missing ones added; any pair touching a
    causal node is left alone.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigError("edge perturbation probability must lie in [0, 1]")
    g = record.graph
    style = np.sort(np.asarray(plan.style_nodes, dtype=np.int64))
    edges = {(int(u), int(v)) for u, v in g.edges.tolist()}
    if len(style) >= 2:
        iu, ju = np.triu_indices(len(style), k=1)
        flips = rng.random(len(iu)) < p
        for a, b in zip(style[iu[flips]].tolist(), style[ju[flips]].tolist()):
            edges.symmetric_difference_update({(a, b)})
    graph = make_graph(g.num_nodes, sorted(edges), g.features, record.predicted_label)
    return AugmentedSample(graph, record.predicted_label, record.explanation, origin,
                           record.probs, "edge_perturb")


def collect_training_set(oracle, shadow: Dataset, budget: int, config: AttackConfig):
    """Query ``budget`` shadow graphs and build the augmented set.

    Each record yields ``k_augments`` samples alternating node-drop and
    edge-perturb (node-drop first). Returns ``(queries, augments)``.
    """
    if budget > len(shadow):
        raise ConfigError(f"budget {budget} exceeds shadow size {len(shadow)}")
    sample_ss, aug_ss = np.random.SeedSequence(config.seed).spawn(2)
    picks = np.random.default_rng(sample_ss).choice(len(shadow), size=budget, replace=False)
    aug_rng = np.random.default_rng(aug_ss)
    queries: List[QueryRecord] = []
    augments: List[AugmentedSample] = []
    for qi, gi in enumerate(picks.tolist()):
        try:
            rec = oracle.query(shadow.graphs[gi])
        except BudgetExhausted as exc:
            raise AttackError(f"oracle refused query {qi} of {budget}: budget accounting is off") from exc
        queries.append(rec)
        if not config.augment:
            continue
        plan = select_style_nodes(rec.explanation, config.alpha)
        for k in range(config.k_augments):
            if k % 2 == 0:
                aug = augment_node_drop(rec, plan, config.beta, aug_rng, qi)
            else:
                aug = augment_edge_perturb(rec, plan, config.edge_perturb_prob, aug_rng, qi)
            if aug is not None:
                augments.append(aug)
    return queries, augments


# --------------------------------------------------------------------------
# alignment losses

def _rank_targets(t: np.ndarray, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    """1 where the target ranks i above j, 0 below, 0.5 on exact ties."""
    return 0.5 * (np.sign(t[i] - t[j]) + 1.0)


def _pairwise_rank_loss(scores: dc.Tensor, i, j, r, weights) -> dc.Tensor:
    """``sum(weights * R(s_i - s_j, r))`` with R the RankNet cross-entropy.

    R is written as ``r * softplus(-d) + (1 - r) * softplus(d)``, which is
    the same quantity as ``-r log sigmoid(d) - (1 - r) log(1 - sigmoid(d))``
    but stays finite for large ``|d|``.
    """
    delta = dc.sub(dc.gather_rows(scores, i), dc.gather_rows(scores, j))
    terms = dc.add(dc.mul(dc.softplus(dc.neg(delta)), r), dc.mul(dc.softplus(delta), 1.0 - r))
    return dc.sum_all(dc.mul(terms, weights))


def rank_alignment_loss(target_expl, surrogate_scores: dc.Tensor) -> dc.Tensor:
    """Mean RankNet loss over all node pairs ``i < j`` of one graph."""
    t = _scores(target_expl)
    surrogate_scores = surrogate_scores if isinstance(surrogate_scores, dc.Tensor) else dc.Tensor(surrogate_scores)
    if surrogate_scores.shape != t.shape:
        raise DimensionError(
            f"rank_alignment_loss: target length {len(t)} vs surrogate {surrogate_scores.shape}"
        )
    n = len(t)
    if n < 2:
        return dc.Tensor(0.0)
    i, j = np.triu_indices(n, k=1)
    r = _rank_targets(t, i, j)
    return _pairwise_rank_loss(surrogate_scores, i, j, r, np.full(len(i), 1.0 / len(i)))


def mse_alignment_loss(target_expl, surrogate_scores: dc.Tensor) -> dc.Tensor:
    t = _scores(target_expl)
    surrogate_scores = surrogate_scores if isinstance(surrogate_scores, dc.Tensor) else dc.Tensor(surrogate_scores)
    if surrogate_scores.shape != t.shape:
        raise DimensionError(
            f"mse_alignment_loss: target length {len(t)} vs surrogate {surrogate_scores.shape}"
        )
    diff = dc.sub(surrogate_scores, t)
    return dc.mean_all(dc.mul(diff, diff))


# --------------------------------------------------------------------------
# Phase 2

@dataclass
class _Sample:
    graph: Graph
    label: int
    probs: Optional[np.ndarray]
    target_scores: np.ndarray


def _samples(queries: Sequence[QueryRecord], augments: Sequence[AugmentedSample]) -> List[_Sample]:
    out = [_Sample(q.graph, q.predicted_label, q.probs, q.explanation.scores) for q in queries]
    out += [_Sample(a.graph, a.label, a.probs, a.explanation.scores) for a in augments]
    return out


def _label_targets(samples: Sequence[_Sample], num_classes: int, soft: bool) -> np.ndarray:
    t = np.zeros((len(samples), num_classes))
    for row, s in enumerate(samples):
        if soft and s.probs is not None:
            t[row] = s.probs
        else:
            t[row, s.label] = 1.0
    return t


class _PairIndex:
    """All within-graph node pairs of a batch with their weights.

    Each graph's pairs share weight ``1 / (|P_g| * B)`` so that the weighted
    sum is the batch mean of per-graph mean pair losses.
    """

    def __init__(self, batch: GraphBatch, samples: Sequence[_Sample], rng=None,
                 max_pairs: Optional[int] = None):
        ii, jj, rr, ww = [], [], [], []
        b = len(samples)
        for off, s in zip(batch.offsets, samples):
            n = s.graph.num_nodes
            if n < 2:
                continue
            i, j = np.triu_indices(n, k=1)
            if max_pairs is not None and len(i) > max_pairs:
                pick = rng.choice(len(i), size=max_pairs, replace=False)
                i, j = i[pick], j[pick]
            ii.append(i + off)
            jj.append(j + off)
            rr.append(_rank_targets(s.target_scores, i, j))
            ww.append(np.full(len(i), 1.0 / (len(i) * b)))
        self.i = np.concatenate(ii) if ii else np.zeros(0, np.int64)
        self.j = np.concatenate(jj) if jj else np.zeros(0, np.int64)
        self.r = np.concatenate(rr) if rr else np.zeros(0)
        self.w = np.concatenate(ww) if ww else np.zeros(0)


def _surrogate_cam(config: ModelConfig, p, h: dc.Tensor, logits: dc.Tensor, batch: GraphBatch) -> dc.Tensor:
    """Graph-CAM scores of every node for its graph's predicted class."""
    predicted = logits.value.argmax(axis=1)
    select = np.eye(config.num_classes)[predicted[batch.graph_index]]
    return dc.row_sum(dc.mul(dc.matmul(h, p["cls.w"]), select))


def _alignment_term(mode, config, p, h, logits, batch, samples, rng, max_pairs):
    cam = _surrogate_cam(config, p, h, logits, batch)
    if mode == "Rank":
        pairs = _PairIndex(batch, samples, rng, max_pairs)
        if not len(pairs.i):
            return None
        return _pairwise_rank_loss(cam, pairs.i, pairs.j, pairs.r, pairs.w)
    target = np.concatenate([s.target_scores for s in samples])
    diff = dc.sub(cam, target)
    # per-graph mean of squared error, then batch mean
    weights = np.repeat(1.0 / (batch.counts * batch.num_graphs), batch.counts)
    return dc.sum_all(dc.mul(dc.mul(diff, diff), weights))


def train_surrogate(queries: Sequence[QueryRecord], augments: Sequence[AugmentedSample],
                    config: AttackConfig, history: Optional[list] = None) -> ModelState:
    """Minimize prediction loss + ``lam`` * alignment loss over queries and augments.

    Augments are ignored when ``config.augment`` is false. ``history`` (if
    given) gets one ``{"epoch", "pred", "align"}`` dict of batch-mean losses
    per epoch.
    """
    if not queries:
        raise ConfigError("no query records to train on")
    samples = _samples(queries, augments if config.augment else [])
    mcfg = config.surrogate
    width = {s.graph.feature_dim for s in samples}
    if width != {mcfg.feature_dim}:
        raise DimensionError(f"sample feature widths {sorted(width)} vs surrogate {mcfg.feature_dim}")
    init_ss, shuffle_ss = np.random.SeedSequence(mcfg.seed).spawn(2)
    state = init_model(mcfg, np.random.default_rng(init_ss))
    rng = np.random.default_rng(shuffle_ss)
    pair_rng = np.random.default_rng(np.random.SeedSequence([mcfg.seed, 7]))
    targets = _label_targets(samples, mcfg.num_classes, config.soft_labels)
    names = list(state.params)
    adam = dc.AdamState(learning_rate=config.learning_rate)
    aligning = config.align_mode != "None" and config.lam > 0
    for epoch in range(config.epochs):
        pred_losses, align_losses = [], []
        for idx in epoch_batches(rng, len(samples), config.batch_size):
            chunk = [samples[i] for i in idx]
            batch = GraphBatch([s.graph for s in chunk])
            p = param_tensors(state)
            with dc.Tape() as tape:
                h, _, logits = encode(mcfg, p, batch)
                loss = dc.soft_cross_entropy(logits, targets[idx])
                pred_losses.append(float(loss.value))
                if aligning:
                    align = _alignment_term(config.align_mode, mcfg, p, h, logits, batch, chunk,
                                            pair_rng, config.max_pairs)
                    if align is not None:
                        align_losses.append(float(align.value))
                        loss = dc.add(loss, dc.scale(align, config.lam))
            if not np.isfinite(loss.value):
                raise TrainingError("non-finite surrogate loss", epoch)
            grads = tape.gradient(loss, [p[k] for k in names])
            new = dc.adam_step([state.params[k] for k in names], grads, adam)
            state = ModelState(mcfg, dict(zip(names, new)))
        if history is not None:
            history.append({
                "epoch": epoch,
                "pred": float(np.mean(pred_losses)),
                "align": float(np.mean(align_losses)) if align_losses else None,
            })
    return state


def train_teacher_student(records: Sequence[QueryRecord], surrogate: ModelConfig, epochs: int = 200,
                          batch_size: int = 64, learning_rate: float = 0.001,
                          soft_labels: bool = True) -> ModelState:
    """Plain distillation on oracle outputs: cross-entropy only, no explanations."""
    init_ss, shuffle_ss = np.random.SeedSequence(surrogate.seed).spawn(2)
    state = init_model(surrogate, np.random.default_rng(init_ss))
    rng = np.random.default_rng(shuffle_ss)
    graphs = [r.graph for r in records]
    targets = np.zeros((len(records), surrogate.num_classes))
    for row, r in enumerate(records):
        if soft_labels and r.probs is not None:
            targets[row] = r.probs
        else:
            targets[row, r.predicted_label] = 1.0
    names = list(state.params)
    adam = dc.AdamState(learning_rate=learning_rate)
    for epoch in range(epochs):
        for idx in epoch_batches(rng, len(graphs), batch_size):
            p = param_tensors(state)
            with dc.Tape() as tape:
                _, _, logits = encode(surrogate, p, GraphBatch([graphs[i] for i in idx]))
                loss = dc.soft_cross_entropy(logits, targets[idx])
            if not np.isfinite(loss.value):
                raise TrainingError("non-finite teacher-student loss", epoch)
            grads = tape.gradient(loss, [p[k] for k in names])
            state = ModelState(surrogate, dict(zip(
                names, dc.adam_step([state.params[k] for k in names], grads, adam))))
    return state


# --------------------------------------------------------------------------
# audit dumps

def dump_training_set(path, queries: Sequence[QueryRecord], augments: Sequence[AugmentedSample]) -> None:
    """One JSON object per line: query records first, then augments."""
    with open(path, "w") as fh:
        for q in queries:
            fh.write(json.dumps({"kind": "query", **q.to_json()}) + "\n")
        for a in augments:
            fh.write(json.dumps({
                "kind": a.kind,
                "origin": a.origin,
                "graph": a.graph.to_wire(),
                "label": a.label,
                "probs": None if a.probs is None else a.probs.tolist(),
                "explanation": a.explanation.scores.tolist(),
                "explainer": a.explanation.method,
                "kept": None if a.kept is None else a.kept.tolist(),
            }) + "\n")


def load_training_set(path) -> Tuple[List[QueryRecord], List[AugmentedSample]]:
    queries, augments = [], []
    with open(path) as fh:
        for line in fh:
            obj = json.loads(line)
            if obj["kind"] == "query":
                queries.append(QueryRecord.from_json(obj))
                continue
            rec = QueryRecord.from_json(obj)
            kept = obj.get("kept")
            augments.append(AugmentedSample(rec.graph, rec.predicted_label, rec.explanation,
                                            int(obj["origin"]), rec.probs, obj["kind"],
                                            None if kept is None else np.asarray(kept, dtype=np.int64)))
    return queries, augments
