import numpy as np
import pytest

from infracascade.cascade import CascadeRecord
from infracascade.config import config_from_dict, kfold, load_config, split
from infracascade.netgen import ConfigError


def fake_records(per_size=100, sizes=range(21)):
    recs, cid = [], 0
    for k in sizes:
        for _ in range(per_size):
            recs.append(CascadeRecord(cid, tuple(range(k)), tuple(range(k)), 0, "test"))
            cid += 1
    return recs


def test_split_sizes_and_strata():
    recs = fake_records()
    tr, va, te = split(recs, seed=0)
    assert (len(tr), len(va), len(te)) == (1260, 420, 420)
    ids = [r.case_id for part in (tr, va, te) for r in part]
    assert sorted(ids) == list(range(2100))
    # each |D| bucket splits 60/20/20
    for part, n in ((tr, 60), (va, 20), (te, 20)):
        counts = np.bincount([len(r.initial_failed) for r in part], minlength=21)
        assert np.all(counts == n)


def test_split_deterministic_and_seeded():
    recs = fake_records(10, range(5))
    assert split(recs, seed=3) == split(recs, seed=3)
    assert split(recs, seed=3) != split(recs, seed=4)
    with pytest.raises(ConfigError):
        split(recs, (0.5, 0.5, 0.5))


def test_split_rounding_on_small_buckets():
    # 7 * (0.6, 0.2, 0.2) = (4.2, 1.4, 1.4): the spare record goes to the earlier .4 part
    tr, va, te = split(fake_records(7, [2]), seed=0)
    assert (len(tr), len(va), len(te)) == (4, 2, 1)


def test_kfold_balance():
    recs = fake_records(7, range(3))
    folds = kfold(recs, 5, seed=1)
    counts = np.bincount(folds, minlength=5)
    assert counts.max() - counts.min() <= 1 and counts.sum() == 21
    with pytest.raises(ConfigError):
        kfold(recs[:3], 5)


def test_hash_ignores_seed_and_output_path():
    a = config_from_dict({"seed": 1, "out": "x"})
    b = config_from_dict({"seed": 2, "out": "y"})
    c = config_from_dict({"seed": 1, "model": {"hidden": 7}})
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()
    assert len(a.config_hash()) == 64
    assert a.meta() == {"config_hash": a.config_hash(), "seed": 1}


def test_overrides():
    cfg = config_from_dict({"seed": 1}).with_overrides(seed=5, ablation="no_gp", threshold=0.3)
    assert cfg.seed == 5 and cfg.model.ablation == "no_gp" and cfg.model.threshold == 0.3
    assert cfg.model.parts() == ("lp", "ie")
    assert cfg.with_overrides(ablation="none").model.ablation is None


@pytest.mark.parametrize(
    "doc, text",
    [
        ({}, "seed"),
        ({"seed": 1, "bogus": 1}, "bogus"),
        ({"seed": 1, "model": {"ablation": "no_everything"}}, "ablation"),
        ({"seed": 1, "model": {"nope": 1}}, "model"),
        ({"seed": 1, "split": {"fractions": [0.9, 0.2, 0.1]}}, "fractions"),
        ({"seed": 1, "sweep": {"layer": "water"}}, "water"),
        ({"seed": 1, "cascade": {"intra_threshold": 2.0}}, "cascade"),
    ],
)
def test_bad_configs(doc, text):
    with pytest.raises(ConfigError, match=text):
        config_from_dict(doc)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("seed = = 1\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_shipped_configs_load():
    for name in ("smoke", "desk", "phase"):
        cfg = load_config(f"configs/{name}.toml")
        assert cfg.netgen.gen_config(cfg.seed).n_elec > 0
