"""Experiment harness and the ``gnnsteal`` command line.

An experiment is described by one JSON file (see :class:`ExperimentConfig`
for the key schema). Every (method, seed) pair is an isolated cell; results
land under ``<output_dir>/<name>/`` as::

    target/<seed>/model.bin, report.json, fingerprint.json
    <method>/<seed>/surrogate.bin, training_set.jsonl, report.json
    cells.csv        one row per (method, seed)
    summary.csv      method x metric, mean and std across seeds
    metadata.json    wall-clock timestamps and durations (the only nondeterministic file)
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .attack import AttackConfig, collect_training_set, dump_training_set, train_surrogate
from .errors import ConfigError, DimensionError, GnnStealError
from .explain import METHODS as EXPLAINERS, explain, graph_cam
from .gnnmodel import ModelConfig, ModelState, forward_many, load_model, save_model, train_model
from .graphdata import (
    Dataset, SplitSpec, generate_motif_dataset, load_tu_dataset, pad_features, split,
    write_tu_dataset,
)
from .metrics import EvalReport, fidelity, mmd_squared, rank_correlation, roc_auc, summarize
from .oracle import Oracle, OracleClient, OracleConfig, OracleServer, serve

__all__ = [
    "ExperimentConfig", "DatasetSpec", "TargetSpec", "AttackSpec", "load_config", "load_dataset",
    "ExperimentResult", "SweepResult", "run_experiment", "evaluate", "sweep_budget",
    "cross_distribution", "main",
]

log = logging.getLogger(__name__)

ATTACK_METHODS = ("TS", "MSE-align", "no-aug", "no-align", "full")
METRICS = ("auc", "fidelity", "rank_corr")


# --------------------------------------------------------------------------
# configuration

def _from_dict(cls, data: Optional[dict]):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


@dataclass(frozen=True)
class DatasetSpec:
    """``kind`` is ``"motif"`` (synthetic) or ``"tu"`` (``path`` + ``tu_name``)."""
    kind: str = "motif"
    n_graphs: int = 800
    seed: int = 41
    edge_prob: float = 0.2
    path: str = ""
    tu_name: str = ""
    feature_dim: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("motif", "tu"):
            raise ConfigError(f"dataset kind must be 'motif' or 'tu', got {self.kind!r}")
        if self.kind == "tu" and not (self.path and self.tu_name):
            raise ConfigError("a TU dataset needs both 'path' and 'tu_name'")


@dataclass(frozen=True)
class TargetSpec:
    arch: str = "GIN"
    num_layers: int = 3
    hidden_dim: int = 128
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 0.001
    explainer: str = "GraphCAM"
    return_probs: bool = True

    def __post_init__(self):
        if self.explainer not in EXPLAINERS:
            raise ConfigError(f"unknown explainer {self.explainer!r}")


@dataclass(frozen=True)
class AttackSpec:
    alpha: float = 0.2
    beta: float = 0.5
    k_augments: int = 2
    edge_perturb_prob: float = 0.1
    lam: float = 1.0
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 0.001
    soft_labels: bool = True
    max_pairs: Optional[int] = None
    arch: str = "GIN"
    num_layers: int = 3
    hidden_dim: int = 128


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment depends on.

    ``budget`` is a fraction of the shadow split when ``budget_fraction`` is
    set, otherwise the absolute ``budget_queries``. Per seed, the split, the
    target init, the query sample and the surrogate init all use that seed.
    ``remote`` is None (in-process oracle), ``"auto"`` (serve each target on
    an ephemeral local port and attack over TCP) or a ``host:port`` of an
    already running service.
    """
    name: str = "motif"
    output_dir: str = "results"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    split: Dict[str, float] = field(default_factory=lambda: {
        "target_train_frac": 0.4, "shadow_frac": 0.4, "test_frac": 0.2, "val_within_target_frac": 0.2})
    target: TargetSpec = field(default_factory=TargetSpec)
    attack: AttackSpec = field(default_factory=AttackSpec)
    methods: tuple = ("TS", "full")
    seeds: tuple = (41, 42, 43, 44, 45)
    budget_fraction: Optional[float] = 0.3
    budget_queries: Optional[int] = None
    workers: int = 1
    remote: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        bad = [m for m in self.methods if m not in ATTACK_METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {ATTACK_METHODS}")
        if (self.budget_fraction is None) == (self.budget_queries is None):
            raise ConfigError("set exactly one of budget_fraction and budget_queries")
        if self.budget_fraction is not None and not 0 < self.budget_fraction <= 1:
            raise ConfigError("budget_fraction must lie in (0, 1]")
        if self.budget_queries is not None and self.budget_queries < 1:
            raise ConfigError("budget_queries must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        self.split_spec(0)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        nested = {"dataset": DatasetSpec, "target": TargetSpec, "attack": AttackSpec}
        for key, sub in nested.items():
            if key in data:
                data[key] = _from_dict(sub, data[key])
        return _from_dict(cls, data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        d["seeds"] = list(self.seeds)
        return d

    @property
    def root(self) -> Path:
        return Path(self.output_dir) / self.name

    def split_spec(self, seed: int) -> SplitSpec:
        return SplitSpec(seed=seed, **self.split)

    def budget_for(self, shadow_size: int) -> int:
        if self.budget_queries is not None:
            q = self.budget_queries
        else:
            q = int(np.floor(self.budget_fraction * shadow_size + 1e-9))
        if q < 1 or q > shadow_size:
            raise ConfigError(f"budget {q} not in [1, shadow size {shadow_size}]")
        return q

    def target_model_config(self, feature_dim: int, num_classes: int, seed: int) -> ModelConfig:
        t = self.target
        return ModelConfig(t.arch, t.num_layers, t.hidden_dim, num_classes, feature_dim, seed)

    def attack_config(self, method: str, feature_dim: int, num_classes: int, seed: int) -> AttackConfig:
        a = self.attack
        surrogate = ModelConfig(a.arch, a.num_layers, a.hidden_dim, num_classes, feature_dim, seed)
        return AttackConfig(
            alpha=a.alpha, beta=a.beta, k_augments=a.k_augments,
            edge_perturb_prob=a.edge_perturb_prob, lam=a.lam, surrogate=surrogate,
            epochs=a.epochs, batch_size=a.batch_size, seed=seed, learning_rate=a.learning_rate,
            soft_labels=a.soft_labels, max_pairs=a.max_pairs,
        ).with_method(method)


def _coerce(value: str):
    try:
        return json.loads(value)
    except ValueError:
        return value


def apply_overrides(data: dict, pairs: Sequence[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as JSON when possible."""
    data = json.loads(json.dumps(data))
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"override {pair!r} is not key=value")
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _coerce(value)
    return data


def load_config(path=None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except ValueError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(apply_overrides(data, overrides))


def load_dataset(spec: DatasetSpec) -> Dataset:
    if spec.kind == "motif":
        return generate_motif_dataset(spec.n_graphs, spec.seed, edge_prob=spec.edge_prob,
                                      name=f"motif-p{spec.edge_prob}")
    return load_tu_dataset(spec.path, spec.tu_name, feature_dim=spec.feature_dim)


# --------------------------------------------------------------------------
# cells

def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _fingerprint(config: ExperimentConfig, seed: int, dataset: Dataset) -> str:
    payload = {
        "dataset": asdict(config.dataset), "dataset_name": dataset.name,
        "feature_dim": dataset.feature_dim, "split": config.split,
        "target": asdict(config.target), "seed": seed,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


@dataclass
class _SeedContext:
    seed: int
    train: Dataset
    val: Dataset
    shadow: Dataset
    test: Dataset
    target: Optional[ModelState] = None
    target_pred: Optional[np.ndarray] = None
    target_expl: Optional[list] = None
    error: Optional[str] = None


def _load_or_train_target(config: ExperimentConfig, ctx: _SeedContext, dataset: Dataset) -> ModelState:
    cell = config.root / "target" / str(ctx.seed)
    model_path = cell / "model.bin"
    fp = _fingerprint(config, ctx.seed, dataset)
    fp_path = cell / "fingerprint.json"
    if model_path.exists() and fp_path.exists() and json.loads(fp_path.read_text()).get("sha256") == fp:
        return load_model(model_path)
    mcfg = config.target_model_config(dataset.feature_dim, dataset.num_classes, ctx.seed)
    t = config.target
    state = train_model(mcfg, ctx.train, ctx.val, epochs=t.epochs, batch_size=t.batch_size,
                        learning_rate=t.learning_rate)
    cell.mkdir(parents=True, exist_ok=True)
    save_model(state, model_path)
    _write_json(fp_path, {"sha256": fp})
    return state


def _score_target(config: ExperimentConfig, ctx: _SeedContext, state: ModelState) -> EvalReport:
    """Cache the target's test predictions/explanations on ``ctx`` and report its AUC."""
    ctx.target = state
    outs = forward_many(state, ctx.test.graphs)
    probs = np.array([o.probs for o in outs])
    ctx.target_pred = probs.argmax(axis=1)
    ctx.target_expl = [explain(state, g, config.target.explainer, fwd=o)[1]
                       for g, o in zip(ctx.test.graphs, outs)]
    report = EvalReport("target", ctx.seed, auc=roc_auc(probs[:, 1], ctx.test.labels))
    _write_json(config.root / "target" / str(ctx.seed) / "report.json", asdict(report))
    return report


def _score_surrogate(surrogate: ModelState, ctx: _SeedContext, method: str) -> EvalReport:
    outs = forward_many(surrogate, ctx.test.graphs)
    probs = np.array([o.probs for o in outs])
    pred = probs.argmax(axis=1)
    expl = [graph_cam(o, surrogate, o.predicted_class) for o in outs]
    rc, skipped = rank_correlation(ctx.target_expl, expl)
    return EvalReport(method, ctx.seed, auc=roc_auc(probs[:, 1], ctx.test.labels),
                      fidelity=fidelity(pred, ctx.target_pred), rank_corr=rc,
                      rank_corr_skipped=skipped)


def _attack_cell(config: ExperimentConfig, ctx: _SeedContext, dataset: Dataset, method: str,
                 cell: Path, extra: Optional[dict] = None) -> EvalReport:
    acfg = config.attack_config(method, dataset.feature_dim, dataset.num_classes, ctx.seed)
    q = config.budget_for(len(ctx.shadow))
    t = config.target
    server = None
    if config.remote is None:
        oracle = Oracle(ctx.target, t.explainer, q, t.return_probs)
    else:
        if config.remote == "auto":
            server = OracleServer(Oracle(ctx.target, t.explainer, q, t.return_probs)).start()
            address = server.address
        else:
            address = config.remote
        oracle = OracleClient(address)
    try:
        queries, augments = collect_training_set(oracle, ctx.shadow, q, acfg)
    finally:
        if isinstance(oracle, OracleClient):
            oracle.close()
        if server is not None:
            server.stop()
    surrogate = train_surrogate(queries, augments, acfg)
    cell.mkdir(parents=True, exist_ok=True)
    save_model(surrogate, cell / "surrogate.bin")
    dump_training_set(cell / "training_set.jsonl", queries, augments if acfg.augment else [])
    report = _score_surrogate(surrogate, ctx, method)
    report.extra.update({"budget": q, "num_queries": len(queries),
                         "num_augments": len(augments) if acfg.augment else 0})
    report.extra.update(extra or {})
    _write_json(cell / "report.json", asdict(report))
    return report


# --------------------------------------------------------------------------
# orchestration

def _fmt(v) -> str:
    return "null" if v is None else repr(float(v)) if isinstance(v, float) else str(v)


def _write_cells_csv(path: Path, rows: List[dict]) -> None:
    cols = ["method", "seed", "status", "auc", "fidelity", "rank_corr", "rank_corr_skipped", "error"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in cols])
    path.write_text(buf.getvalue())


def summary_rows(reports: Sequence[EvalReport], methods: Sequence[str]) -> List[dict]:
    rows = []
    for m in ["target", *methods]:
        s = summarize([r for r in reports if r.method == m])
        row = {"method": m, "n_seeds": len({r.seed for r in reports if r.method == m})}
        for metric in METRICS:
            row[f"{metric}_mean"] = s[metric]["mean"]
            row[f"{metric}_std"] = s[metric]["std"]
        rows.append(row)
    return rows


def _write_summary_csv(path: Path, rows: List[dict]) -> None:
    cols = ["method"] + [f"{m}_{k}" for m in METRICS for k in ("mean", "std")] + ["n_seeds"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in cols])
    path.write_text(buf.getvalue())


@dataclass
class ExperimentResult:
    reports: List[EvalReport]
    cells: List[dict]
    summary: List[dict]
    root: Path

    @property
    def ok(self) -> bool:
        return all(c["status"] == "ok" for c in self.cells)

    def by_method(self, method: str) -> List[EvalReport]:
        return [r for r in self.reports if r.method == method]

    def mean(self, method: str, metric: str) -> Optional[float]:
        return summarize(self.by_method(method))[metric]["mean"]


def _error_text(exc: BaseException) -> str:
    return f"{type(exc).__name__}: {exc}"


def _run_cells(config: ExperimentConfig, dataset: Dataset, subdir: Optional[str],
               shadow_override: Optional[Dataset] = None, extra: Optional[Dict[int, dict]] = None,
               seeds: Optional[Sequence[int]] = None, methods: Optional[Sequence[str]] = None
               ) -> ExperimentResult:
    seeds = list(config.seeds if seeds is None else seeds)
    methods = list(config.methods if methods is None else methods)
    out_root = config.root / subdir if subdir else config.root
    out_root.mkdir(parents=True, exist_ok=True)
    started = time.time()
    timings: Dict[str, float] = {}

    contexts: Dict[int, _SeedContext] = {}
    for seed in seeds:
        tr, va, sh, te = split(dataset, config.split_spec(seed))
        contexts[seed] = _SeedContext(seed, tr, va, shadow_override or sh, te)

    def target_job(seed):
        t0 = time.time()
        ctx = contexts[seed]
        try:
            return _score_target(config, ctx, _load_or_train_target(config, ctx, dataset)), None
        except Exception as exc:  # recorded per cell; other seeds proceed
            log.error("target seed %d failed: %s", seed, traceback.format_exc())
            ctx.error = _error_text(exc)
            return None, ctx.error
        finally:
            timings[f"target/{seed}"] = time.time() - t0

    def attack_job(method, seed):
        t0 = time.time()
        ctx = contexts[seed]
        if ctx.error:
            return None, f"target unavailable: {ctx.error}"
        try:
            return _attack_cell(config, ctx, dataset, method, out_root / method / str(seed),
                                (extra or {}).get(seed)), None
        except Exception as exc:
            log.error("cell %s/%d failed: %s", method, seed, traceback.format_exc())
            return None, _error_text(exc)
        finally:
            timings[f"{method}/{seed}"] = time.time() - t0

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        target_results = list(pool.map(target_job, seeds))
        jobs = [(m, s) for m in methods for s in seeds]
        attack_results = list(pool.map(lambda ms: attack_job(*ms), jobs))

    reports, cells = [], []
    for seed, (rep, err) in zip(seeds, target_results):
        cells.append(_cell_row("target", seed, rep, err))
        if rep:
            reports.append(rep)
    for (m, seed), (rep, err) in zip(jobs, attack_results):
        cells.append(_cell_row(m, seed, rep, err))
        if rep:
            reports.append(rep)

    summary = summary_rows(reports, methods)
    _write_cells_csv(out_root / "cells.csv", cells)
    _write_summary_csv(out_root / "summary.csv", summary)
    _write_json(out_root / "config.json", config.to_dict())
    _write_json(out_root / "metadata.json", {
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "seconds": round(time.time() - started, 3),
        "cell_seconds": {k: round(v, 3) for k, v in sorted(timings.items())},
    })
    return ExperimentResult(reports, cells, summary, out_root)


def _cell_row(method, seed, rep: Optional[EvalReport], err: Optional[str]) -> dict:
    row = {"method": method, "seed": seed, "status": "ok" if rep else "failed", "error": err}
    if rep:
        row.update(auc=rep.auc, fidelity=rep.fidelity, rank_corr=rep.rank_corr,
                   rank_corr_skipped=rep.rank_corr_skipped if rep.method != "target" else None)
    return row


def run_experiment(config: ExperimentConfig, dataset: Optional[Dataset] = None,
                   seeds: Optional[Sequence[int]] = None,
                   methods: Optional[Sequence[str]] = None) -> ExperimentResult:
    """Target row plus every configured method for every seed.

    Targets are cached under ``target/<seed>`` keyed by a fingerprint of the
    settings they depend on, so repeated runs and sweeps train each once.
    """
    dataset = dataset if dataset is not None else load_dataset(config.dataset)
    return _run_cells(config, dataset, None, seeds=seeds, methods=methods)


def evaluate(config: ExperimentConfig, dataset: Optional[Dataset] = None) -> ExperimentResult:
    """Re-score saved target and surrogate models without training anything."""
    dataset = dataset if dataset is not None else load_dataset(config.dataset)
    reports, cells = [], []
    for seed in config.seeds:
        tr, va, sh, te = split(dataset, config.split_spec(seed))
        ctx = _SeedContext(seed, tr, va, sh, te)
        try:
            rep = _score_target(config, ctx, load_model(config.root / "target" / str(seed) / "model.bin"))
            reports.append(rep)
            cells.append(_cell_row("target", seed, rep, None))
        except (OSError, GnnStealError) as exc:
            cells.append(_cell_row("target", seed, None, _error_text(exc)))
            continue
        for m in config.methods:
            cell = config.root / m / str(seed)
            try:
                rep = _score_surrogate(load_model(cell / "surrogate.bin"), ctx, m)
                old = json.loads((cell / "report.json").read_text()) if (cell / "report.json").exists() else {}
                rep.extra.update(old.get("extra", {}))
                _write_json(cell / "report.json", asdict(rep))
                reports.append(rep)
                cells.append(_cell_row(m, seed, rep, None))
            except (OSError, GnnStealError) as exc:
                cells.append(_cell_row(m, seed, None, _error_text(exc)))
    summary = summary_rows(reports, config.methods)
    _write_cells_csv(config.root / "cells.csv", cells)
    _write_summary_csv(config.root / "summary.csv", summary)
    return ExperimentResult(reports, cells, summary, config.root)


@dataclass
class SweepResult:
    rows: List[dict]
    runs: Dict[float, ExperimentResult]

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.runs.values())


def sweep_budget(config: ExperimentConfig, fractions: Sequence[float],
                 dataset: Optional[Dataset] = None) -> SweepResult:
    """One experiment per query fraction plus a long-format table.

    Rows are ``{fraction, method, metric, mean, std}`` and are also written
    to ``<root>/sweep_budget.csv``. Targets are shared across fractions.
    """
    dataset = dataset if dataset is not None else load_dataset(config.dataset)
    rows, runs = [], {}
    for f in fractions:
        cfg = replace(config, budget_fraction=float(f), budget_queries=None)
        res = runs[float(f)] = _run_cells(cfg, dataset, f"budget-{f:g}")
        for srow in res.summary:
            for metric in METRICS:
                rows.append({"fraction": float(f), "method": srow["method"], "metric": metric,
                             "mean": srow[f"{metric}_mean"], "std": srow[f"{metric}_std"]})
    cols = ("fraction", "method", "metric", "mean", "std")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in cols])
    config.root.mkdir(parents=True, exist_ok=True)
    (config.root / "sweep_budget.csv").write_text(buf.getvalue())
    return SweepResult(rows, runs)


def cross_distribution(config: ExperimentConfig, shadow_override: Dataset,
                       dataset: Optional[Dataset] = None, label: Optional[str] = None
                       ) -> ExperimentResult:
    """Run the pipeline with a foreign shadow set.

    Feature widths are zero-padded to the wider of the two datasets. The
    squared MMD between the shadow set and each seed's target-train split is
    stored in every report's ``extra["mmd2"]`` and in ``mmd.json``.
    """
    dataset = dataset if dataset is not None else load_dataset(config.dataset)
    if shadow_override.num_classes != dataset.num_classes:
        raise DimensionError(
            f"shadow has {shadow_override.num_classes} classes, target data has {dataset.num_classes}"
        )
    width = max(dataset.feature_dim, shadow_override.feature_dim)
    dataset = pad_features(dataset, width)
    shadow_override = pad_features(shadow_override, width)
    sub = f"cross-{label or shadow_override.name}".replace("/", "_")
    mmds = {}
    for seed in config.seeds:
        tr, _, _, _ = split(dataset, config.split_spec(seed))
        mmds[seed] = mmd_squared(shadow_override.graphs, tr.graphs)
    extra = {seed: {"mmd2": v} for seed, v in mmds.items()}
    res = _run_cells(config, dataset, sub, shadow_override=shadow_override, extra=extra)
    _write_json(res.root / "mmd.json", {
        "shadow": shadow_override.name,
        "per_seed": {str(k): v for k, v in mmds.items()},
        "mean": float(np.mean(list(mmds.values()))),
    })
    return res


# --------------------------------------------------------------------------
# command line

def _render_table(path: Path) -> str:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return ""
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows)


def _config_from_args(args) -> ExperimentConfig:
    overrides = list(args.set or [])
    if getattr(args, "seeds", None):
        overrides.append(f"seeds={json.dumps([int(s) for s in args.seeds.split(',')])}")
    if getattr(args, "methods", None):
        overrides.append(f"methods={json.dumps(args.methods.split(','))}")
    if getattr(args, "workers", None):
        overrides.append(f"workers={args.workers}")
    if getattr(args, "remote", None):
        overrides.append(f"remote={json.dumps(args.remote)}")
    if getattr(args, "output_dir", None):
        overrides.append(f"output_dir={json.dumps(args.output_dir)}")
    return load_config(args.config, overrides)


def _add_common(p):
    p.add_argument("--config", help="experiment JSON file (defaults apply when omitted)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key, e.g. --set attack.lam=2.0 (repeatable)")
    p.add_argument("--seeds", help="comma-separated seed list")
    p.add_argument("--methods", help=f"comma-separated subset of {','.join(ATTACK_METHODS)}")
    p.add_argument("--workers", type=int, help="parallel cells")
    p.add_argument("--output-dir", help="results root directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gnnsteal", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="materialize the dataset (TU layout) and per-seed split indices")
    _add_common(p)

    p = sub.add_parser("train-target", help="train and cache the target model for each seed")
    _add_common(p)

    p = sub.add_parser("serve", help="serve a saved target model over TCP")
    p.add_argument("--model", required=True)
    p.add_argument("--explainer", default="GraphCAM", choices=EXPLAINERS)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--listen", default="127.0.0.1:7311")
    p.add_argument("--hard-labels", action="store_true", help="omit class probabilities")

    p = sub.add_parser("attack", help="run every (method, seed) cell and write the summary")
    _add_common(p)
    p.add_argument("--remote", help="'auto' or host:port of a running oracle service")

    p = sub.add_parser("evaluate", help="re-score saved models on the test split")
    _add_common(p)

    p = sub.add_parser("sweep-budget", help="repeat the attack across query fractions")
    _add_common(p)
    p.add_argument("--fractions", default="0.1,0.2,0.3,0.4,0.5")

    p = sub.add_parser("cross-dist", help="attack with a shadow set from another distribution")
    _add_common(p)
    p.add_argument("--shadow", required=True,
                   help="JSON dataset spec, e.g. '{\"kind\": \"motif\", \"edge_prob\": 0.35}'")
    p.add_argument("--label", help="name for the output subdirectory")

    p = sub.add_parser("report", help="print summary tables found under the experiment root")
    _add_common(p)
    return parser


def _cmd_prepare(config: ExperimentConfig) -> int:
    ds = load_dataset(config.dataset)
    data_dir = config.root / "data"
    write_tu_dataset(ds, data_dir, "DATA")
    position = {id(g): i for i, g in enumerate(ds.graphs)}
    splits = {}
    for seed in config.seeds:
        parts = split(ds, config.split_spec(seed))
        splits[str(seed)] = {
            key: [position[id(g)] for g in part.graphs]
            for key, part in zip(("target_train", "target_val", "shadow", "test"), parts)
        }
    _write_json(data_dir / "splits.json", splits)
    print(f"wrote {len(ds)} graphs to {data_dir}")
    return 0


def _cmd_train_target(config: ExperimentConfig) -> int:
    res = run_experiment(config, methods=[])
    for c in res.cells:
        print(f"seed {c['seed']}: {c['status']} auc={_fmt(c.get('auc'))}"
              + (f" error={c['error']}" if c["error"] else ""))
    return 0 if res.ok else 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "serve":
            serve(OracleConfig(args.model, args.explainer, args.budget, not args.hard_labels,
                               args.listen))
            return 0
        config = _config_from_args(args)
        if args.command == "prepare":
            return _cmd_prepare(config)
        if args.command == "train-target":
            return _cmd_train_target(config)
        if args.command in ("attack", "evaluate"):
            res = run_experiment(config) if args.command == "attack" else evaluate(config)
            print(_render_table(res.root / "summary.csv"))
            return 0 if res.ok else 1
        if args.command == "sweep-budget":
            fractions = [float(f) for f in args.fractions.split(",")]
            sweep = sweep_budget(config, fractions)
            print(_render_table(config.root / "sweep_budget.csv"))
            return 0 if sweep.ok else 1
        if args.command == "cross-dist":
            shadow = load_dataset(_from_dict(DatasetSpec, json.loads(args.shadow)))
            res = cross_distribution(config, shadow, label=args.label)
            print(_render_table(res.root / "summary.csv"))
            print(f"mmd2 per seed: {json.loads((res.root / 'mmd.json').read_text())['per_seed']}")
            return 0 if res.ok else 1
        if args.command == "report":
            found = sorted(config.root.glob("**/summary.csv")) + sorted(config.root.glob("sweep_budget.csv"))
            if not found:
                print(f"no results under {config.root}", file=sys.stderr)
                return 1
            for path in found:
                print(f"== {path.relative_to(config.root)}")
                print(_render_table(path))
            return 0
    except (GnnStealError, OSError, ValueError) as exc:
        print(f"error: {_error_text(exc)}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
