import numpy as np
import pytest
from scipy.sparse import csgraph

from infracascade.graph import LayerKind, RelationKind, dump_graph
from infracascade.netgen import ConfigError, GenConfig, generate, reference_preset

FULL = {"n_elec": 10_227, "n_road": 4_825, "n_com": 20_229}


def test_same_seed_same_graph():
    cfg = GenConfig(5, 5, 5, 5, seed=7)
    assert dump_graph(generate(cfg)) == dump_graph(generate(cfg))
    other = GenConfig(5, 5, 5, 5, seed=8)
    assert dump_graph(generate(cfg)) != dump_graph(generate(other))


def test_preset_counts():
    assert reference_preset(1).n_elec == 10_227
    assert reference_preset(0.01).n_elec == 102
    assert reference_preset(1).expected_coupling_edges()[RelationKind.ELEC_ROAD] == 7_799
    full = reference_preset(1).expected_coupling_edges()
    assert full[RelationKind.ELEC_COM] == 20_352
    assert full[RelationKind.ELEC_AOI] == 21_569
    assert full[RelationKind.COM_AOI] == 37_279
    with pytest.raises(ConfigError):
        reference_preset(0)


def test_preset_ratios_at_desk_scale():
    cfg = reference_preset(1 / 40)
    got = np.array([cfg.n_elec, cfg.n_road, cfg.n_com], dtype=float)
    want = np.array(list(FULL.values()), dtype=float)
    assert np.all(np.abs(got / got.sum() - want / want.sum()) / (want / want.sum()) < 0.02)


def test_generated_counts_and_guarantees():
    cfg = reference_preset(1 / 100, seed=3)
    g = generate(cfg)
    assert [g.layer_nodes[k].size for k in LayerKind] == [cfg.n_elec, cfg.n_road, cfg.n_com, cfg.n_aoi]
    aoi = g.layer_nodes[LayerKind.AOI]
    for rel in (RelationKind.ELEC_AOI, RelationKind.COM_AOI):
        supply = np.diff(g.relation_adjacency(rel).indptr)[aoi]
        assert supply.min() >= 1
    for layer in (LayerKind.ELECTRIC, LayerKind.ROAD, LayerKind.COM):
        sub, _ = g.layer_subgraph(layer)
        ncomp, _ = csgraph.connected_components(sub.adjacency(), directed=False)
        assert ncomp == 1
    # coupling edge counts track their targets
    for rel, target in cfg.expected_coupling_edges().items():
        assert abs(g.edge_count(rel) - target) <= max(3, 0.1 * target)
    # top-tier generators exist and are tagged
    assert np.any(g.tiers[g.layer_nodes[LayerKind.ELECTRIC]] == 0)


def test_zero_aoi_supply_rejected():
    cfg = GenConfig(5, 5, 5, 5, density={"elec-aoi": 0.0})
    with pytest.raises(ConfigError, match="elec-aoi"):
        generate(cfg)


def test_bad_counts_rejected():
    with pytest.raises(ConfigError):
        GenConfig(0, 5, 5, 5).validate()
