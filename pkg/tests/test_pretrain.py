import numpy as np
import pytest

from infracascade.autodiff import Tensor, gradient_error
from infracascade.cascade import build_dataset
from infracascade.graph import HeteroGraph, RelationKind, capped_distance, mean_initial_distance
from infracascade.netgen import ConfigError, GenConfig, generate
from infracascade.pretrain import (
    GpConfig,
    IeConfig,
    LpConfig,
    PretrainConfig,
    ScopeView,
    build_gd_features,
    cluster_offsets,
    failure_beliefs,
    gp_embedding,
    gp_predict,
    ie_embeddings,
    load_pretrained,
    lp_loss,
    lp_score,
    pretrained_state,
    rmse,
    run_all_pretraining,
    sample_non_edges,
    train_gp,
    train_ie,
    train_lp,
)

from conftest import path_graph, random_single

RR = RelationKind.ROAD_ROAD


def ring(n):
    return HeteroGraph([1] * n, [(i, (i + 1) % n, RR) for i in range(n)])


def test_lp_score_examples():
    E = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 2.0], [3.0, 4.0]])
    assert lp_score(E, [[0, 1], [0, 2], [3, 4]]).tolist() == [0.0, 1.0, 11.0]
    with pytest.raises(ValueError):
        lp_score(E, [[0, 9]])


def test_lp_loss_examples():
    # one positive with score 0.5, one negative with score 0.2
    E = Tensor(np.array([[1.0, 0.0], [0.5, 0.0], [0.2, 0.0]]))
    assert lp_loss(E, [[0, 1]], [[0, 2]], 1.0, 0.0).item() == pytest.approx(0.7, rel=1e-15)
    assert lp_loss(Tensor(np.zeros((3, 2))), [[0, 1]], [[0, 2]], 1.0, 0.5).item() == 1.0
    # hinge inactive: only the l2 term remains
    E = Tensor(np.array([[2.0, 0.0], [2.0, 0.0], [0.0, 2.0]]))
    assert lp_loss(E, [[0, 1]], [[0, 2]], 1.0, 0.1).item() == pytest.approx(0.1 * 12.0, rel=1e-15)
    with pytest.raises(ValueError):
        lp_loss(E, [], [[0, 2]], 1.0, 0.0)


def test_lp_loss_gradient():
    rng = np.random.default_rng(0)
    for _ in range(5):
        E = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
        pos = rng.integers(0, 6, size=(4, 2))
        neg = rng.integers(0, 6, size=(8, 2))
        assert gradient_error(lambda: lp_loss(E, pos, neg, 1.0, 0.01), [E]) <= 1e-4


def test_negatives_are_non_edges():
    g = ring(10)
    neg = sample_non_edges(g, 200, np.random.default_rng(0))
    adj = g.adjacency().toarray()
    assert neg.shape == (200, 2)
    assert np.all(neg[:, 0] != neg[:, 1])
    assert not adj[neg[:, 0], neg[:, 1]].any()
    triangle = HeteroGraph([1] * 3, [(0, 1, RR), (1, 2, RR), (0, 2, RR)])
    with pytest.raises(ConfigError, match="complete"):
        sample_non_edges(triangle, 1, np.random.default_rng(0))


def test_train_lp_learns_and_is_deterministic():
    E, hist = train_lp(ring(20), LpConfig(epochs=50, dim=8), seed=1)
    assert hist[-1] < hist[0]
    E2, _ = train_lp(ring(20), LpConfig(epochs=50, dim=8), seed=1)
    assert np.array_equal(E, E2)
    with pytest.raises(ConfigError):
        train_lp(HeteroGraph([1, 1], []), LpConfig(epochs=1))


def test_lp_ranks_true_edges_above_non_edges():
    rng = np.random.default_rng(2)
    g = random_single(rng, 50, p=0.1)
    E, _ = train_lp(g, LpConfig(epochs=200, dim=16), seed=3)
    edges = np.stack([g.src, g.dst], axis=1)
    neg = sample_non_edges(g, 500, np.random.default_rng(4))
    assert lp_score(E, edges).mean() > lp_score(E, neg).mean()


def test_gd_features():
    g = HeteroGraph([0, 0, 0, 0], [(0, 1, RelationKind.ELEC_ELEC), (1, 2, RelationKind.ELEC_ELEC)])
    X = build_gd_features(g, [0])
    assert X[0].tolist() == [0.0, 0.0]
    assert X[1].tolist() == [1.0, 1.0]
    assert X[3].tolist() == [1.0, 4.0]
    with pytest.raises(ValueError):
        build_gd_features(g, [])


def test_rmse_definition():
    assert rmse([1, 2], [1, 4]) == np.sqrt(2)


def test_cluster_offsets_hand_case():
    # six nodes, two clusters {0,1,2} and {3,4,5}
    values = np.array([0.0, 1.0, 2.0, 4.0, 5.0, 9.0])
    assign = np.array([0, 0, 0, 1, 1, 1])
    expect = []
    for v in range(6):
        members = [u for u in range(6) if assign[u] == assign[v]]
        expect.append(sum(values[members]) / len(members) - values.mean())
    assert np.allclose(cluster_offsets(values, assign), expect, rtol=1e-15)
    assert not cluster_offsets(values, np.zeros(6, dtype=int)).any()


@pytest.fixture(scope="module")
def road():
    return random_single(np.random.default_rng(5), 30, p=0.12)


def test_train_gp_reduces_rmse_and_is_deterministic(road):
    rng = np.random.default_rng(0)
    sets = [rng.choice(30, size=rng.integers(1, 5), replace=False) for _ in range(40)]
    cfg = GpConfig(levels=3, clusters=(6, 2), steps=60, batch_cases=8)
    stack = train_gp(road, sets, cfg, seed=2)
    assert np.mean(stack.history[-10:]) < np.mean(stack.history[:10])
    assert np.all(np.isfinite(gp_predict(stack, road, sets)))
    again = train_gp(road, sets, cfg, seed=2)
    assert all(np.array_equal(a, b) for a, b in zip(stack.state().values(), again.state().values()))


def test_train_gp_constant_target():
    # every case fails every node: the target is constant
    g = path_graph(6)
    sets = [np.arange(6)] * 8
    stack = train_gp(g, sets, GpConfig(levels=2, clusters=(2,), steps=30, batch_cases=4), seed=0)
    assert stack.history[-1] < 1e-3
    assert np.allclose(gp_predict(stack, g, sets[:2]), mean_initial_distance(g, sets[0]), atol=1e-3)


def test_gp_config_validation():
    with pytest.raises(ConfigError):
        GpConfig(levels=1, clusters=())
    with pytest.raises(ConfigError):
        GpConfig(levels=3, clusters=(4, 4))


def test_gp_embedding_matches_brute_force(road):
    rng = np.random.default_rng(1)
    sets = [rng.choice(30, size=3, replace=False) for _ in range(10)]
    stack = train_gp(road, sets, GpConfig(levels=3, clusters=(5, 2), steps=5, batch_cases=4), seed=0)
    d = sets[0]
    emb = gp_embedding(stack, road, d)
    assert emb.shape == (30, 2)
    total = sum(capped_distance(road, [i]) for i in d).astype(float)
    for lvl, assign in enumerate(stack.assignments(stack_view(road), [np.sort(d)])[0]):
        for v in range(30):
            members = [u for u in range(30) if assign[u] == assign[v]]
            want = total[members].mean() - total.mean()
            assert emb[v, lvl] == pytest.approx(want, rel=1e-12, abs=1e-12)
    assert not gp_embedding(stack, road, []).any()


def stack_view(g):
    return ScopeView("t", g, np.arange(g.num_nodes), g.num_nodes)


def two_islands():
    # two 10-node paths with no edge between them
    edges = [(i, i + 1, RR) for i in range(9)] + [(i, i + 1, RR) for i in range(10, 19)]
    return HeteroGraph([1] * 20, edges)


def test_ie_separates_failed_component():
    g = two_islands()
    rng = np.random.default_rng(0)
    sets = [rng.choice(10, size=2, replace=False) for _ in range(30)]
    model = train_ie(g, sets, cfg=IeConfig(dim=8, steps=80, em_rounds=1, batch_cases=8), seed=1)
    b = np.mean([failure_beliefs(model, g, d) for d in sets[:10]], axis=0)
    assert b[:10].mean() > b[10:].mean()


def test_ie_zero_rounds_and_determinism():
    g = two_islands()
    sets = [[0], [3, 4], [11]]
    cfg = IeConfig(dim=4, steps=10, batch_cases=2)
    a = train_ie(g, sets, em_rounds=0, cfg=cfg, seed=3)
    b = train_ie(g, sets, em_rounds=0, cfg=cfg, seed=3)
    assert len(a.labeled_ll) == 1
    ea, eb = ie_embeddings(a, g, sets), ie_embeddings(b, g, sets)
    assert all(np.array_equal(x, y) for x, y in zip(ea, eb))
    # the embedding is q's hidden state
    assert np.array_equal(ea[0], a.q_hidden(stack_view(g).sym, np.array([[0.0]] + [[1.0]] * 19)).data)
    with pytest.raises(ConfigError):
        train_ie(g, [[]], cfg=cfg)


def test_run_all_pretraining_scopes_and_round_trip():
    g = generate(GenConfig(12, 10, 14, 8, seed=0))
    recs = build_dataset(g, 3, range(1, 4), seed=0)
    cfg = PretrainConfig(LpConfig(epochs=5, dim=4), GpConfig(levels=3, clusters=(4, 2), steps=3), IeConfig(dim=4, steps=3, em_rounds=1))
    models = run_all_pretraining(g, recs, cfg, seed=1)
    assert sorted(models) == ["aoi", "com", "coupled", "electric", "road"]
    for m in models.values():
        for emb in m.embeddings(recs[:2]):
            assert emb.gp.shape[1] == 2
            assert np.all(np.isfinite(emb.lp)) and np.all(np.isfinite(emb.ie))
    state = pretrained_state(models)
    assert all(k.startswith("emb.") for k in state)
    back = load_pretrained(g, state)
    for name, m in models.items():
        e1, e2 = m.embeddings(recs[:3]), back[name].embeddings(recs[:3])
        for x, y in zip(e1, e2):
            assert np.array_equal(x.gp, y.gp) and np.array_equal(x.ie, y.ie)
    again = pretrained_state(run_all_pretraining(g, recs, cfg, seed=1))
    assert all(np.array_equal(state[k], again[k]) for k in state)
