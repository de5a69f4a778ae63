"""Evaluation metrics: ROC-AUC, prediction fidelity, Kendall tau, and the
structural-feature MMD used to quantify shadow/target distribution shift."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components, shortest_path
from scipy.stats import rankdata

from .errors import DimensionError, UndefinedMetricError
from .graphdata import Graph

__all__ = [
    "roc_auc", "fidelity", "kendall_tau", "rank_correlation", "structural_features",
    "feature_matrix", "zscore_jointly", "gaussian_mmd2", "mmd_squared", "EvalReport",
    "summarize",
]


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 * P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape:
        raise DimensionError("scores and labels differ in length")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    ranks = rankdata(scores, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def fidelity(surrogate_labels, target_labels) -> float:
    a = np.asarray(surrogate_labels)
    b = np.asarray(target_labels)
    if a.shape != b.shape:
        raise DimensionError("label vectors differ in length")
    if a.size == 0:
        raise DimensionError("fidelity of an empty set")
    return float(np.mean(a == b))


def kendall_tau(x, y, variant: str = "b") -> float:
    """Kendall rank correlation by direct pair counting.

    ``variant="b"`` applies the tie correction
    ``(C - D) / sqrt((C + D + Tx) * (C + D + Ty))`` where ``Tx`` counts pairs
    tied only in ``x``. ``variant="a"`` divides by the total pair count.
    Raises :class:`UndefinedMetricError` when either input is constant.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError("kendall_tau needs two 1-d arrays of equal length")
    n = len(x)
    if n < 2:
        raise DimensionError("kendall_tau needs at least two observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedMetricError("constant input")
    i, j = np.triu_indices(n, k=1)
    sx = np.sign(x[i] - x[j])
    sy = np.sign(y[i] - y[j])
    prod = sx * sy
    concordant = int(np.sum(prod > 0))
    discordant = int(np.sum(prod < 0))
    if variant == "a":
        return (concordant - discordant) / len(i)
    if variant != "b":
        raise ValueError(f"unknown tau variant {variant!r}")
    tx = int(np.sum((sx == 0) & (sy != 0)))
    ty = int(np.sum((sy == 0) & (sx != 0)))
    denom = np.sqrt(float(concordant + discordant + tx) * float(concordant + discordant + ty))
    return float((concordant - discordant) / denom)


def rank_correlation(target_expls: Sequence, surrogate_expls: Sequence, variant: str = "b"):
    """Mean per-graph tau between paired explanation vectors.

    Graphs where tau is undefined (constant explanation or a single node) are
    skipped. Returns ``(mean_tau, n_skipped)``; ``mean_tau`` is NaN when every
    graph was skipped.
    """
    if len(target_expls) != len(surrogate_expls):
        raise DimensionError("explanation lists differ in length")
    taus, skipped = [], 0
    for a, b in zip(target_expls, surrogate_expls):
        a = getattr(a, "scores", a)
        b = getattr(b, "scores", b)
        try:
            taus.append(kendall_tau(a, b, variant))
        except (UndefinedMetricError, DimensionError):
            skipped += 1
    return (float(np.mean(taus)) if taus else float("nan")), skipped


# --------------------------------------------------------------------------
# structural features and MMD

def _five_stats(values: np.ndarray) -> List[float]:
    p25, med, p75 = np.percentile(values, [25, 50, 75])
    return [float(values.mean()), float(values.std()), float(p25), float(med), float(p75)]


def structural_features(graph: Graph) -> np.ndarray:
    """16 structural descriptors of one graph.

    Degree mean/std/p25/median/p75, local clustering mean/std/p25/median/p75,
    diameter of the largest connected component, and the five largest
    adjacency eigenvalues in descending order, zero-padded for graphs with
    fewer than five nodes. Percentiles interpolate linearly; std is the
    population standard deviation.
    """
    n = graph.num_nodes
    if n < 1:
        raise DimensionError("structural_features needs at least one node")
    adj = graph.adjacency()
    deg = adj.sum(axis=1)
    triangles = np.diag(adj @ adj @ adj) / 2.0
    pairs = deg * (deg - 1) / 2.0
    clustering = np.divide(triangles, pairs, out=np.zeros(n), where=pairs > 0)

    _, comp = connected_components(adj, directed=False)
    sizes = np.bincount(comp)
    largest = np.flatnonzero(comp == np.argmax(sizes))
    if len(largest) > 1:
        dist = shortest_path(adj[np.ix_(largest, largest)], unweighted=True, directed=False)
        diameter = float(dist.max())
    else:
        diameter = 0.0

    eig = np.sort(np.linalg.eigvalsh(adj))[::-1][:5]
    eig = np.concatenate([eig, np.zeros(5 - len(eig))])
    return np.array(_five_stats(deg) + _five_stats(clustering) + [diameter] + eig.tolist())


def feature_matrix(graphs: Sequence[Graph]) -> np.ndarray:
    return np.stack([structural_features(g) for g in graphs])


def zscore_jointly(a: np.ndarray, b: np.ndarray, eps: float = 1e-8):
    """Normalize both samples with the mean/std of their union."""
    both = np.concatenate([a, b], axis=0)
    mu = both.mean(axis=0)
    sigma = both.std(axis=0)
    return (a - mu) / (sigma + eps), (b - mu) / (sigma + eps)


def _gauss(x, y, gamma):
    sq = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * x @ y.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


def gaussian_mmd2(x: np.ndarray, y: np.ndarray, gamma: float = 0.5, biased: bool = True) -> float:
    """Squared MMD with kernel ``exp(-gamma * ||x - y||^2)``.

    The default is the V-statistic (self-pairs included); ``biased=False``
    gives the U-statistic.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if not len(x) or not len(y):
        raise DimensionError("MMD needs two nonempty samples")
    kxx, kyy, kxy = _gauss(x, x, gamma), _gauss(y, y, gamma), _gauss(x, y, gamma)
    if biased:
        return float(kxx.mean() + kyy.mean() - 2.0 * kxy.mean())
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise DimensionError("unbiased MMD needs at least two points per sample")
    xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(xx + yy - 2.0 * kxy.mean())


def mmd_squared(a, b, gamma: float = 0.5, normalize: bool = True, biased: bool = True,
                eps: float = 1e-8) -> float:
    """MMD^2 between two sets of structural feature vectors (or graphs).

    Accepts lists of graphs or feature arrays. With ``normalize`` the two
    sets are z-scored jointly before the kernel is applied.
    """
    a = feature_matrix(a) if len(a) and isinstance(a[0], Graph) else np.asarray(a, dtype=np.float64)
    b = feature_matrix(b) if len(b) and isinstance(b[0], Graph) else np.asarray(b, dtype=np.float64)
    if normalize:
        a, b = zscore_jointly(np.atleast_2d(a), np.atleast_2d(b), eps)
    return gaussian_mmd2(a, b, gamma, biased)


# --------------------------------------------------------------------------
# reports

@dataclass
class EvalReport:
    method: str
    seed: Optional[int] = None
    auc: Optional[float] = None
    fidelity: Optional[float] = None
    rank_corr: Optional[float] = None
    rank_corr_skipped: int = 0
    extra: Dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=2)


def summarize(reports: Sequence[EvalReport]) -> Dict[str, Dict[str, Optional[float]]]:
    """Mean and population std per metric across seeds; None where absent.

    ``std`` is None when only one seed contributed.
    """
    out = {}
    for metric in ("auc", "fidelity", "rank_corr"):
        vals = [getattr(r, metric) for r in reports if getattr(r, metric) is not None]
        vals = [v for v in vals if np.isfinite(v)]
        if not vals:
            out[metric] = {"mean": None, "std": None, "n": 0}
        else:
            out[metric] = {
                "mean": float(np.mean(vals)),
                "std": float(np.std(vals)) if len(vals) > 1 else None,
                "n": len(vals),
            }
    return out
