import pytest
import yaml

from cntpp.config import CONFIG_SCHEMA, ConfigError, EffectConfig, RunConfig, desk_config
from cntpp.world import WorldSpec


def test_defaults_are_desk_scale():
    cfg = desk_config()
    assert (cfg.world.n_users, cfg.world.n_news, cfg.world.d_f) == (1500, 40, 4)
    assert cfg.oracle.rollouts == 200
    assert cfg.split == (8, 2, 3)
    assert cfg.effect.window == 10.0 and cfg.effect.step is None


def test_hash_is_stable_and_sensitive():
    a, b = RunConfig(), RunConfig()
    assert a.hash() == b.hash() and len(a.hash()) == 16
    c = RunConfig(effect=EffectConfig(window=5.0))
    assert c.hash() != a.hash()


def test_seeds_are_authoritative():
    cfg = RunConfig.from_dict({"seeds": {"world": 4, "model": 7}})
    r = cfg.resolved()
    assert r.world.seed == 4 and r.train.seed == 7
    assert cfg.stamp()["seeds"] == {"world": 4, "model": 7, "oracle": 0}


def test_world_seed_section_fills_seeds():
    cfg = RunConfig.from_dict({"world": {"seed": 9}})
    assert cfg.seeds.world == 9


def test_round_trip_through_dict():
    cfg = RunConfig.from_dict({"world": {"n_users": 50}, "train": {"epochs": 3}, "effect": {"step": 0.2}})
    doc = cfg.to_dict()
    assert doc["schema"] == CONFIG_SCHEMA
    assert RunConfig.from_dict(doc).hash() == cfg.hash()


def test_yaml_load(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump({"schema": CONFIG_SCHEMA, "world": {"n_users": 30}, "oracle": {"rollouts": 10}}))
    cfg = RunConfig.load(p)
    assert cfg.world.n_users == 30 and cfg.oracle.rollouts == 10


def test_world_path_relative_to_config(tmp_path):
    (tmp_path / "w.yaml").write_text(yaml.safe_dump({"world": {"n_users": 12, "n_news": 3}}))
    (tmp_path / "run.yaml").write_text(yaml.safe_dump({"world_path": "w.yaml", "world": {"n_news": 4}}))
    cfg = RunConfig.load(tmp_path / "run.yaml")
    assert (cfg.world.n_users, cfg.world.n_news) == (12, 4)


@pytest.mark.parametrize("doc", [
    {"schema": "cntpp-run/0"},
    {"bogus": 1},
    {"train": {"epochs": 0}},
    {"train": {"nope": 1}},
    {"effect": {"step": -1.0}},
    {"effect": {"mode": "magic"}},
    {"oracle": {"rollouts": 1}},
    {"split": [1, 0, 1]},
    {"world": {"n_users": 0}},
    {"world_path": "/does/not/exist.yaml"},
])
def test_invalid_configs(doc):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(doc)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "nope.yaml")


def test_non_mapping(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        RunConfig.load(p)


def test_full_scale_world_preset():
    w = WorldSpec.full()
    assert (w.n_users, w.n_news) == (15000, 120)
