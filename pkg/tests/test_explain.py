import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gnnsteal.explain import (
    edges_to_node_scores, explain, grad_cam, grad_explain, graph_cam,
)
from gnnsteal.gnnmodel import ForwardOutput, ModelConfig, ModelState, forward
from gnnsteal.graphdata import make_graph

from conftest import random_graph, random_model


def _fixed_state(w_c):
    cfg = ModelConfig("GIN", 1, 2, 2, 2, 0)
    params = {"cls.w": np.column_stack([w_c, -np.asarray(w_c)]), "cls.b": np.array([0.25, 0.0])}
    return ModelState(cfg, params)


def test_graph_cam_hand_example():
    F = np.array([[1.0, 0.0], [0.0, 2.0]])
    state = _fixed_state([0.5, -1.0])
    pooled = F.mean(axis=0)
    logits = pooled @ state.cls_weight + state.cls_bias
    fwd = ForwardOutput(F, pooled, logits, np.exp(logits) / np.exp(logits).sum())
    e = graph_cam(fwd, state, 0)
    np.testing.assert_allclose(e.scores, [0.5, -2.0])
    assert e.class_used == 0 and e.method == "GraphCAM"
    # conservation: mean score = y_c - b_c = 0.5 * 0.5 + (-1) * 1.0
    assert e.scores.mean() == pytest.approx(-0.75)
    assert logits[0] - state.cls_bias[0] == pytest.approx(-0.75)


def test_graph_cam_zero_weights_and_bad_class():
    F = np.array([[1.0, 3.0], [2.0, 2.0]])
    state = _fixed_state([0.0, 0.0])
    fwd = ForwardOutput(F, F.mean(0), np.zeros(2), np.full(2, 0.5))
    assert np.all(graph_cam(fwd, state, 0).scores == 0)
    with pytest.raises(IndexError):
        graph_cam(fwd, state, 2)


def test_graph_cam_conservation_random():
    rng = np.random.default_rng(0)
    for _ in range(200):
        state = random_model(rng, arch=rng.choice(["GIN", "GCN"]))
        g = random_graph(rng)
        fwd = forward(state, g)
        c = fwd.predicted_class
        e = graph_cam(fwd, state, c)
        assert e.scores.mean() == pytest.approx(fwd.logits[c] - state.cls_bias[c], abs=1e-9)


def test_grad_explain_is_uniform_under_mean_pooling():
    rng = np.random.default_rng(1)
    for _ in range(50):
        state = random_model(rng)
        g = random_graph(rng)
        c = forward(state, g).predicted_class
        e = grad_explain(state, g, c)
        expected = np.linalg.norm(np.maximum(state.cls_weight[:, c], 0)) / g.num_nodes
        np.testing.assert_allclose(e.scores, expected, atol=1e-12)


def test_grad_cam_identity_with_graph_cam():
    rng = np.random.default_rng(2)
    for _ in range(50):
        state = random_model(rng, arch=rng.choice(["GIN", "GCN"]))
        g = random_graph(rng)
        fwd = forward(state, g)
        c = fwd.predicted_class
        gc = grad_cam(state, g, c).scores
        cam = graph_cam(fwd, state, c).scores
        np.testing.assert_allclose(gc, np.maximum(cam, 0) / g.num_nodes, atol=1e-12)
        # same ordering on the positive part
        pos = cam > 0
        assert np.array_equal(np.argsort(cam[pos], kind="stable"), np.argsort(gc[pos], kind="stable"))


def test_grad_cam_zero_gradient_gives_zero():
    rng = np.random.default_rng(3)
    state = random_model(rng)
    state.params["cls.w"][:] = 0.0
    g = random_graph(rng, n=4)
    assert np.all(grad_cam(state, g, 0).scores == 0)
    assert np.all(grad_explain(state, g, 0).scores == 0)


def test_grad_explain_relu_gate():
    rng = np.random.default_rng(4)
    state = random_model(rng)
    state.params["cls.w"][:, 0] = -np.abs(state.params["cls.w"][:, 0])
    g = random_graph(rng, n=3)
    assert np.all(grad_explain(state, g, 0).scores == 0)


def test_nonnegative_scores_many_trials():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        state = random_model(rng, hidden=4, layers=1)
        g = random_graph(rng, n=int(rng.integers(1, 6)))
        c = int(rng.integers(2))
        assert np.all(grad_explain(state, g, c).scores >= 0)
        assert np.all(grad_cam(state, g, c).scores >= 0)


@pytest.mark.parametrize("method", ["GraphCAM", "Grad", "GradCAM"])
def test_permutation_equivariance(method):
    rng = np.random.default_rng(6)
    for _ in range(30):
        state = random_model(rng)
        g = random_graph(rng)
        perm = rng.permutation(g.num_nodes)
        _, a = explain(state, g, method)
        _, b = explain(state, g.permute(perm), method)
        np.testing.assert_allclose(a.scores[perm], b.scores, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_scale_covariance(seed, s):
    rng = np.random.default_rng(seed)
    state = random_model(rng)
    g = random_graph(rng)
    fwd = forward(state, g)
    base = graph_cam(fwd, state, 0).scores
    scaled = ModelState(state.config, dict(state.params))
    scaled.params["cls.w"] = state.params["cls.w"].copy()
    scaled.params["cls.w"][:, 0] *= s
    out = graph_cam(fwd, scaled, 0).scores
    np.testing.assert_allclose(out, s * base, rtol=1e-12, atol=1e-12)
    assert np.array_equal(np.argsort(out, kind="stable"), np.argsort(base, kind="stable"))


def test_edges_to_node_scores():
    # path 0-1-2 plus isolated node 3
    g = make_graph(4, [(0, 1), (1, 2)], np.zeros((4, 1)))
    e = edges_to_node_scores({(0, 1): 0.2, (2, 1): 0.4}, g)
    np.testing.assert_allclose(e.scores, [0.2, 0.3, 0.4, 0.0])
    ones = edges_to_node_scores({(0, 1): 1.0, (1, 2): 1.0}, g)
    np.testing.assert_array_equal(ones.scores, [1.0, 1.0, 1.0, 0.0])
    with pytest.raises(KeyError):
        edges_to_node_scores({(0, 3): 1.0, (0, 1): 1.0, (1, 2): 1.0}, g)
