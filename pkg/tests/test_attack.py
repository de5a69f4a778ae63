import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gnnsteal import diffcore as dc
from gnnsteal.attack import (
    AttackConfig, AttackError, StylePlan, augment_edge_perturb, augment_node_drop,
    collect_training_set, dump_training_set, load_training_set, mse_alignment_loss,
    rank_alignment_loss, select_style_nodes, train_surrogate, train_teacher_student,
)
from gnnsteal.errors import ConfigError, DimensionError
from gnnsteal.explain import ExplanationVector
from gnnsteal.gnnmodel import ModelConfig
from gnnsteal.graphdata import Dataset, make_graph
from gnnsteal.metrics import kendall_tau
from gnnsteal.oracle import Oracle, OracleClient, OracleServer, QueryRecord

from conftest import random_graph, random_model


def record(graph, scores, label=1, probs=None):
    return QueryRecord(graph, label, probs, ExplanationVector(np.asarray(scores, float), label, "GraphCAM"))


def R(delta, r):
    return float(rank_alignment_loss([1.0, 0.0] if r == 1 else [0.0, 1.0] if r == 0 else [0.0, 0.0],
                                     dc.Tensor([delta, 0.0])).value)


# -- style selection and augmentation ------------------------------------

def test_style_selection_examples():
    assert select_style_nodes([0.9, 0.1, 0.5, 0.3], 0.5).style_nodes.tolist() == [1, 3]
    assert select_style_nodes([0.9, 0.1, 0.5, 0.3], 0.0).style_nodes.tolist() == []
    plan = select_style_nodes([0.2] * 4, 0.5)
    assert plan.style_nodes.tolist() == [0, 1] and plan.causal_nodes.tolist() == [2, 3]
    with pytest.raises(ConfigError):
        select_style_nodes([1.0], 1.5)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=20), st.floats(0, 1))
def test_style_selection_size_and_order(scores, alpha):
    plan = select_style_nodes(np.array(scores, float), alpha)
    n = len(scores)
    assert len(plan.style_nodes) == math.floor(alpha * n + 1e-9)
    assert sorted(plan.style_nodes.tolist() + plan.causal_nodes.tolist()) == list(range(n))
    if len(plan.style_nodes) and len(plan.causal_nodes):
        assert max(scores[i] for i in plan.style_nodes) <= min(scores[i] for i in plan.causal_nodes)


def test_node_drop_path_example():
    g = make_graph(4, [(0, 1), (1, 2), (2, 3)], np.eye(4))
    rec = record(g, [0.4, 0.1, 0.7, 0.2])
    aug = augment_node_drop(rec, StylePlan(np.array([1, 3]), np.array([0, 2])), 1.0,
                            np.random.default_rng(0), origin=5)
    assert aug.graph.num_nodes == 2 and aug.graph.num_edges == 0
    np.testing.assert_array_equal(aug.graph.features, np.eye(4)[[0, 2]])
    np.testing.assert_array_equal(aug.explanation.scores, [0.4, 0.7])
    assert aug.label == 1 and aug.origin == 5 and aug.kind == "node_drop"


def test_node_drop_beta_zero_is_identity():
    rng = np.random.default_rng(1)
    g = random_graph(rng, n=8)
    rec = record(g, rng.normal(size=8))
    aug = augment_node_drop(rec, select_style_nodes(rec.explanation, 0.5), 0.0, rng)
    assert aug.graph.edges.tolist() == g.edges.tolist()
    np.testing.assert_array_equal(aug.explanation.scores, rec.explanation.scores)


def test_node_drop_that_empties_graph_is_skipped(caplog):
    g = make_graph(1, [], np.ones((1, 7)))
    plan = StylePlan(np.array([0]), np.zeros(0, int))
    with caplog.at_level("WARNING"):
        assert augment_node_drop(record(g, [0.3]), plan, 1.0, np.random.default_rng(0)) is None
    assert "skipped" in caplog.text


def test_edge_perturb_triangle_at_p1():
    tri = make_graph(3, [(0, 1), (0, 2), (1, 2)], np.eye(3))
    aug = augment_edge_perturb(record(tri, [1, 2, 3]), StylePlan(np.array([0, 1, 2]), np.zeros(0, int)),
                               1.0, np.random.default_rng(0))
    assert aug.graph.num_edges == 0
    g = make_graph(4, [(0, 1), (2, 3)], np.eye(4))
    aug = augment_edge_perturb(record(g, [1, 2, 3, 4]), StylePlan(np.array([0, 1, 2]), np.array([3])),
                               1.0, np.random.default_rng(0))
    assert aug.graph.edges.tolist() == [[0, 2], [1, 2], [2, 3]]
    np.testing.assert_array_equal(aug.explanation.scores, [1, 2, 3, 4])


def test_edge_perturb_identities():
    rng = np.random.default_rng(2)
    g = random_graph(rng, n=9)
    rec = record(g, rng.normal(size=9))
    plan = select_style_nodes(rec.explanation, 0.5)
    assert augment_edge_perturb(rec, plan, 0.0, rng).graph.edges.tolist() == g.edges.tolist()
    empty = StylePlan(np.zeros(0, int), np.arange(9))
    assert augment_edge_perturb(rec, empty, 1.0, rng).graph.edges.tolist() == g.edges.tolist()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 1), st.floats(0, 1))
def test_augments_respect_causal_part(seed, alpha, p):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n=int(rng.integers(2, 14)))
    rec = record(g, rng.normal(size=g.num_nodes), label=int(rng.integers(2)))
    plan = select_style_nodes(rec.explanation, alpha)
    style = set(plan.style_nodes.tolist())
    pert = augment_edge_perturb(rec, plan, p, rng)
    before = {e for e in map(tuple, g.edges.tolist()) if not (e[0] in style and e[1] in style)}
    after = {e for e in map(tuple, pert.graph.edges.tolist()) if not (e[0] in style and e[1] in style)}
    assert before == after
    assert pert.label == rec.predicted_label
    drop = augment_node_drop(rec, plan, float(rng.random()), rng)
    assert drop is not None and drop.label == rec.predicted_label
    assert len(drop.explanation.scores) == drop.graph.num_nodes
    assert set(plan.causal_nodes.tolist()) <= set(range(g.num_nodes))
    # every causal node survives the drop, so its score does too
    kept = [s for s in rec.explanation.scores[plan.causal_nodes]]
    assert all(any(s == t for t in drop.explanation.scores) for s in kept)


# -- alignment losses -----------------------------------------------------

def test_rank_loss_closed_forms():
    assert R(0.0, 1) == pytest.approx(math.log(2), abs=1e-12)
    assert R(2.0, 1) == pytest.approx(0.126928, abs=1e-6)
    assert R(2.0, 0) == pytest.approx(2.126928, abs=1e-6)
    assert R(2.0, 0.5) == pytest.approx(0.5 * (0.126928011 + 2.126928011), abs=1e-6)


@settings(max_examples=200, deadline=None)
@given(st.floats(-30, 30))
def test_rank_loss_symmetry_and_sign(delta):
    assert R(delta, 1) == R(-delta, 0)
    assert R(delta, 1) >= 0 and R(delta, 0) >= 0


@settings(max_examples=100, deadline=None)
@given(st.floats(-10, 10), st.sampled_from([0, 0.5, 1]))
def test_rank_loss_gradient_identity(delta, r):
    target = {1: [1.0, 0.0], 0: [0.0, 1.0], 0.5: [0.0, 0.0]}[r]
    s = dc.Tensor([delta, 0.0], requires_grad=True)
    with dc.Tape() as tape:
        loss = rank_alignment_loss(target, s)
    (g,) = tape.gradient(loss, [s])
    sig = 1.0 / (1.0 + math.exp(-delta))
    assert g[0] == pytest.approx(sig - r, abs=1e-9)
    h = 1e-6
    fd = (R(delta + h, r) - R(delta - h, r)) / (2 * h)
    assert g[0] == pytest.approx(fd, abs=1e-6)


def test_rank_loss_mean_over_pairs_and_edge_cases():
    t = np.array([3.0, 1.0, 2.0])
    s = np.array([0.5, -0.2, 0.1])
    pairs = [(0, 1), (0, 2), (1, 2)]
    sp = lambda x: math.log1p(math.exp(x))
    ref = 0.0
    for i, j in pairs:
        r = 1.0 if t[i] > t[j] else 0.0
        d = s[i] - s[j]
        ref += r * sp(-d) + (1 - r) * sp(d)
    assert float(rank_alignment_loss(t, dc.Tensor(s)).value) == pytest.approx(ref / 3, abs=1e-12)
    assert float(rank_alignment_loss([1.0], dc.Tensor([5.0])).value) == 0.0
    with pytest.raises(DimensionError):
        rank_alignment_loss([1.0, 2.0], dc.Tensor([1.0, 2.0, 3.0]))


def test_rank_loss_monotone_alignment():
    rng = np.random.default_rng(3)
    for _ in range(20):
        t = rng.normal(size=5)
        s = dc.Tensor(t.copy(), requires_grad=True)
        with dc.Tape() as tape:
            loss = rank_alignment_loss(t, s)
        (g,) = tape.gradient(loss, [s])
        assert float(loss.value) < math.log(2)
        stepped = rank_alignment_loss(t, dc.Tensor(t - 0.1 * g))
        assert float(stepped.value) < float(loss.value)


def test_mse_loss():
    assert float(mse_alignment_loss([1.0, 2.0], dc.Tensor([1.0, 2.0])).value) == 0.0
    assert float(mse_alignment_loss([0.0, 1.0], dc.Tensor([1.0, 0.0])).value) == 1.0
    rng = np.random.default_rng(4)
    t, v = rng.normal(size=6), rng.normal(size=6)
    s = dc.Tensor(v, requires_grad=True)
    with dc.Tape() as tape:
        loss = mse_alignment_loss(t, s)
    (g,) = tape.gradient(loss, [s])
    np.testing.assert_allclose(g, 2 * (v - t) / 6, atol=1e-14)
    with pytest.raises(DimensionError):
        mse_alignment_loss([1.0], dc.Tensor([1.0, 2.0]))


# -- phase 1 ----------------------------------------------------------------

@pytest.fixture(scope="module")
def target():
    return random_model(np.random.default_rng(200), hidden=8)


@pytest.fixture(scope="module")
def shadow():
    rng = np.random.default_rng(201)
    return Dataset([random_graph(rng, n=int(rng.integers(3, 12))) for _ in range(30)], 2, 7, "shadow")


SMALL = ModelConfig(hidden_dim=8, num_layers=2, seed=3)


def test_collect_accounting(target, shadow):
    orc = Oracle(target, budget=25)
    q, a = collect_training_set(orc, shadow, 10, AttackConfig(k_augments=2, surrogate=SMALL))
    assert len(q) == 10 and len(a) <= 20 and orc.remaining_budget == 15
    assert [x.kind for x in a[:2]] == ["node_drop", "edge_perturb"]
    assert all(x.label == q[x.origin].predicted_label for x in a)
    q2, a2 = collect_training_set(Oracle(target, budget=10), shadow, 10,
                                  AttackConfig(augment=False, surrogate=SMALL))
    assert len(q2) == 10 and a2 == []


def test_collect_budget_independent_of_k(target, shadow):
    for k in (0, 1, 5):
        orc = Oracle(target, budget=12)
        collect_training_set(orc, shadow, 12, AttackConfig(k_augments=k, surrogate=SMALL))
        assert orc.remaining_budget == 0


def test_collect_refusal_is_fatal(target, shadow):
    with pytest.raises(AttackError):
        collect_training_set(Oracle(target, budget=3), shadow, 5, AttackConfig(surrogate=SMALL))
    with pytest.raises(ConfigError):
        collect_training_set(Oracle(target, budget=99), shadow, 31, AttackConfig(surrogate=SMALL))


def test_collect_is_deterministic_over_the_wire(target, shadow):
    cfg = AttackConfig(k_augments=4, surrogate=SMALL, seed=9)
    local = collect_training_set(Oracle(target, budget=8), shadow, 8, cfg)
    srv = OracleServer(Oracle(target, budget=8)).start()
    try:
        with OracleClient(srv.address) as client:
            remote = collect_training_set(client, shadow, 8, cfg)
    finally:
        srv.stop()
    for part_a, part_b in zip(local, remote):
        assert len(part_a) == len(part_b)
        for x, y in zip(part_a, part_b):
            assert x.graph.edges.tolist() == y.graph.edges.tolist()
            assert x.explanation.scores.tobytes() == y.explanation.scores.tobytes()


def test_node_drop_restriction_keeps_ranking(target, shadow):
    _, augs = collect_training_set(Oracle(target, budget=30), shadow, 30,
                                   AttackConfig(k_augments=2, alpha=0.5, surrogate=SMALL))
    q, _ = collect_training_set(Oracle(target, budget=30), shadow, 30,
                                AttackConfig(k_augments=0, surrogate=SMALL))
    for aug in augs:
        if aug.kind != "node_drop" or aug.graph.num_nodes < 2:
            continue
        scores = aug.explanation.scores
        if np.all(scores == scores[0]):
            continue
        assert kendall_tau(scores, scores) == 1.0
        assert set(scores.tolist()) <= set(q[aug.origin].explanation.scores.tolist())


def test_dump_load_round_trip(tmp_path, target, shadow):
    q, a = collect_training_set(Oracle(target, budget=6), shadow, 6, AttackConfig(surrogate=SMALL))
    path = tmp_path / "train.jsonl"
    dump_training_set(path, q, a)
    q2, a2 = load_training_set(path)
    assert len(q2) == len(q) and len(a2) == len(a)
    for x, y in zip(a, a2):
        assert (x.kind, x.origin, x.label) == (y.kind, y.origin, y.label)
        assert x.explanation.scores.tobytes() == y.explanation.scores.tobytes()
        assert x.probs.tobytes() == y.probs.tobytes()
        assert x.graph.edges.tolist() == y.graph.edges.tolist()


# -- phase 2 ----------------------------------------------------------------

def _same_params(a, b):
    return all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


@pytest.mark.parametrize("soft", [True, False])
def test_ts_reduction_is_bitwise(target, shadow, soft):
    q, a = collect_training_set(Oracle(target, budget=20), shadow, 20, AttackConfig(surrogate=SMALL))
    cfg = AttackConfig(surrogate=SMALL, epochs=4, batch_size=8, soft_labels=soft).with_method("TS")
    ref = train_teacher_student(q, SMALL, epochs=4, batch_size=8, soft_labels=soft)
    assert _same_params(train_surrogate(q, a, cfg), ref)
    # lam = 0 with augmentation off is the same objective
    lam0 = AttackConfig(surrogate=SMALL, epochs=4, batch_size=8, lam=0.0, augment=False, soft_labels=soft)
    assert _same_params(train_surrogate(q, a, lam0), ref)


def test_alignment_changes_the_result(target, shadow):
    q, a = collect_training_set(Oracle(target, budget=20), shadow, 20, AttackConfig(surrogate=SMALL))
    base = AttackConfig(surrogate=SMALL, epochs=3, batch_size=8)
    assert not _same_params(train_surrogate(q, a, base), train_surrogate(q, a, base.with_method("TS")))
    assert _same_params(train_surrogate(q, a, base), train_surrogate(q, a, base))


def test_large_lambda_alignment_decreases(target, shadow):
    q, a = collect_training_set(Oracle(target, budget=30), shadow, 30, AttackConfig(surrogate=SMALL))
    for mode in ("Rank", "MSE"):
        hist = []
        cfg = AttackConfig(surrogate=SMALL, epochs=6, batch_size=64, lam=100.0, align_mode=mode,
                           augment=False, learning_rate=0.001)
        train_surrogate(q, a, cfg, history=hist)
        align = [h["align"] for h in hist]
        assert all(x > y for x, y in zip(align, align[1:])), (mode, align)
        assert 100.0 * align[0] > hist[0]["pred"]


def test_train_surrogate_rejects_bad_input(target):
    with pytest.raises(ConfigError):
        train_surrogate([], [], AttackConfig(surrogate=SMALL))
    g = make_graph(2, [(0, 1)], np.ones((2, 3)))
    with pytest.raises(DimensionError):
        train_surrogate([record(g, [1.0, 2.0], probs=np.array([0.5, 0.5]))], [],
                        AttackConfig(surrogate=SMALL, epochs=1))


def test_config_validation():
    with pytest.raises(ConfigError):
        AttackConfig(alpha=1.5)
    with pytest.raises(ConfigError):
        AttackConfig(lam=-1)
    with pytest.raises(ConfigError):
        AttackConfig(align_mode="L1")
    with pytest.raises(ConfigError):
        AttackConfig().with_method("magic")
    assert AttackConfig().with_method("no-aug").augment is False
