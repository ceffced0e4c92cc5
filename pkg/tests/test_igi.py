import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdflow.autodiff import Value
from crowdflow.config import IGIConfig
from crowdflow.igi import IGI, build_knn, sim1, sim2, sim3
from crowdflow.nn import make_rng

vec = st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))


def test_knn_examples():
    g = build_knn(np.zeros((1, 2)), 6)
    assert g.neighbors(0) == []
    g = build_knn(np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]]), 1)
    assert g.neighbors(1) == [0] and g.neighbors(0) == [1] and g.neighbors(2) == [1]
    g = build_knn(np.random.default_rng(0).normal(size=(4, 2)), 10)
    for i in range(4):
        assert sorted(g.neighbors(i)) == [j for j in range(4) if j != i]


def test_knn_respects_validity_and_groups():
    pos = np.array([[0.0, 0.0], [0.1, 0.0], [0.2, 0.0], [5.0, 0.0]])
    g = build_knn(pos, 2, valid=np.array([True, False, True, True]), groups=np.array([0, 0, 0, 1]))
    assert g.neighbors(0) == [2] and g.neighbors(1) == [] and g.neighbors(3) == []


@given(st.lists(vec, min_size=1, max_size=8, unique=True), st.integers(0, 8))
@settings(max_examples=100, deadline=None)
def test_knn_matches_brute_force(points, k):
    pos = np.array(points, dtype=float)
    g = build_knn(pos, k)
    for i in range(len(pos)):
        d = [(np.linalg.norm(pos[i] - pos[j]), j) for j in range(len(pos)) if j != i]
        d.sort()
        got = g.distances(i)
        assert len(got) == min(k, len(pos) - 1)
        np.testing.assert_allclose(got, [x for x, _ in d[:len(got)]])


def test_similarity_anchor_values():
    for f in (sim1, sim2, sim3):
        assert f([1.0, 2.0], [2.0, 4.0]) == pytest.approx(1.0, abs=1e-12)
        assert f([1.0, 2.0], [-1.0, -2.0]) == pytest.approx(0.0, abs=1e-12)
        assert f([1.0, 0.0], [0.0, 3.0]) == pytest.approx(0.5, abs=1e-12)
        assert f([0.0, 0.0], [1.0, 0.0]) == 0.5
    assert sim3([1, 0, 0, 2], [0, 1, 0, 0]) == 0.5


@given(vec, vec)
def test_similarities_in_unit_interval(x, y):
    for f in (sim1, sim2, sim3):
        assert 0.0 <= f(x, y) <= 1.0


# independent numpy reference of the message passing

def _mlp(layers, x):
    for i, layer in enumerate(layers):
        x = x @ layer.weight.data.T + layer.bias.data
        if i < len(layers) - 1:
            x = np.tanh(x)
    return x


def _unit(x):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.where(n > 0, x / np.where(n > 0, n, 1), 0.0)


def _cos01(x, y):
    return 0.5 * (np.sum(_unit(x) * _unit(y), axis=-1, keepdims=True) + 1)


def _reference(gnn, s, p, v, a, noise, graph):
    N, cfg = len(p), gnn.cfg
    w = np.concatenate([v, a], axis=-1)
    g = np.zeros((N, 4))
    for i in range(N):
        nb = graph.neighbors(i)
        if nb:
            g[i] = w[nb].mean(axis=0)
    h = _mlp(gnn.mlp_init.layers, np.concatenate([s, noise, g], axis=-1))
    agg = np.zeros((N, cfg.hidden))
    s3 = _cos01(w, g)
    for i in range(N):
        msgs = []
        for j in graph.neighbors(i):
            parts = []
            if cfg.use_rij:
                parts += [p[j] - p[i], v[j] - v[i]]
            if cfg.use_sim1:
                parts.append(_cos01(p[j] - p[i], v[j]))
            if cfg.use_sim2:
                parts.append(_cos01(v[i], v[j]))
            if cfg.use_sim3:
                parts.append(s3[i])
            if parts:
                msgs.append(_mlp(gnn.mlp_edge.layers, np.concatenate(parts)))
        if msgs:
            agg[i] = np.mean(msgs, axis=0)
    for mlp in gnn.mlp_node:
        h = _mlp(mlp.layers, np.concatenate([h, agg, _unit(g)], axis=-1))
    return _mlp(gnn.mlp_out.layers, h)


@pytest.mark.parametrize("toggles", list(itertools.product([False, True], repeat=4)))
def test_gnn_matches_reference(toggles):
    rng = make_rng(3)
    cfg = IGIConfig(top_k=2, layers=2, hidden=3, d_social=2, **dict(zip(
        ["use_rij", "use_sim1", "use_sim2", "use_sim3"], toggles)))
    gnn = IGI(cfg, rng)
    for _, prm in gnn.named_parameters():
        prm.data[...] += 0.3 * rng.normal(size=prm.shape)
    N = 5
    p, v, a = rng.normal(size=(N, 2)), rng.normal(size=(N, 2)), rng.normal(size=(N, 2))
    s, noise = rng.normal(size=(N, 6)), rng.normal(size=(N, 2))
    graph = build_knn(p, cfg.top_k)
    out = gnn(Value(s), Value(p), Value(v), Value(a), noise, graph).data
    np.testing.assert_allclose(out, _reference(gnn, s, p, v, a, noise, graph), rtol=1e-12, atol=1e-14)


def test_isolated_node_depends_only_on_own_state():
    rng = make_rng(4)
    gnn = IGI(IGIConfig(top_k=0, hidden=4, d_social=3), rng)
    s, noise = rng.normal(size=(2, 6)), rng.normal(size=(2, 2))
    p, v, a = (rng.normal(size=(2, 2)) for _ in range(3))
    out1 = gnn(Value(s), Value(p), Value(v), Value(a), noise, build_knn(p, 0)).data
    v2 = v.copy()
    v2[1] += 5.0
    out2 = gnn(Value(s), Value(p), Value(v2), Value(a), noise, build_knn(p, 0)).data
    np.testing.assert_array_equal(out1[0], out2[0])


def test_gnn_permutation_equivariance():
    rng = make_rng(5)
    gnn = IGI(IGIConfig(top_k=3, hidden=4, d_social=3), rng)
    N = 6
    p = np.stack([np.arange(N) * 1.3, rng.uniform(-0.2, 0.2, N)], axis=-1)
    v, a, s, noise = rng.normal(size=(N, 2)), rng.normal(size=(N, 2)), rng.normal(size=(N, 6)), rng.normal(size=(N, 2))
    perm = rng.permutation(N)
    out = gnn(Value(s), Value(p), Value(v), Value(a), noise, build_knn(p, 3)).data
    outp = gnn(Value(s[perm]), Value(p[perm]), Value(v[perm]), Value(a[perm]), noise[perm],
               build_knn(p[perm], 3)).data
    np.testing.assert_allclose(outp, out[perm], rtol=1e-12, atol=1e-14)
