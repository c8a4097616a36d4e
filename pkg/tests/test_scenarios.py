import dataclasses

import pytest

from mtmfq.scenarios import (BUILDERS, ConfigError, GroupConfig, ScenarioConfig,
                             battle_gathering_config, dump_scenario, is_predator, load_scenario,
                             multi_battle_config, predator_prey_config, scenario_by_name)

A, B, C, D = range(4)


def test_multi_battle_reward_tables():
    cfg = multi_battle_config()
    assert cfg.groups[A].attack_reward[D] == 0.4 and cfg.groups[A].kill_reward[D] == 100
    assert cfg.groups[B].kill_reward[A] == 100
    assert cfg.groups[C].kill_reward[B] == 100 and cfg.groups[D].kill_reward[C] == 100
    for g, grp in enumerate(cfg.groups):
        assert grp.attack_reward[g] == 0 and grp.kill_reward[g] == 0
        others = [h for h in range(4) if h != g]
        assert sorted(grp.attack_reward[h] for h in others) == [0.2, 0.3, 0.4]
        assert sorted(grp.kill_reward[h] for h in others) == [80, 90, 100]


def test_multi_battle_stats():
    for grp in multi_battle_config().groups:
        assert (grp.max_hp, grp.damage, grp.step_recovery) == (10, 2, 0.1)
        assert (grp.move_penalty, grp.dead_penalty, grp.attack_empty_penalty) == (-0.01, -1, -0.1)
        assert grp.initial_count == 72


def test_gathering_adds_food_only():
    battle, gather = multi_battle_config(), battle_gathering_config()
    assert gather.food.collect_reward == 80 and gather.food.hit_reward == 0.5
    assert gather.food.count == 64 and gather.food.hp == 4
    assert gather.groups == battle.groups
    assert battle.food.count == 0


def test_predator_prey_tables():
    cfg = predator_prey_config()
    assert cfg.groups[A].attack_reward[D] == 3 and cfg.groups[A].attack_reward[C] == 1
    assert cfg.groups[A].attack_reward[B] == 0.5
    assert cfg.groups[B].attack_reward[C] == 3 and cfg.groups[B].attack_reward[D] == 1
    for g, grp in enumerate(cfg.groups):
        for h in range(4):
            assert grp.kill_reward[h] == (0 if g == h else 5)
    assert [grp.initial_count for grp in cfg.groups] == [45, 45, 90, 90]
    assert cfg.receiver_punishment and cfg.mode == "unknown_types"


def test_predator_prey_stats():
    cfg = predator_prey_config()
    for g in (A, B):
        grp = cfg.groups[g]
        assert (grp.max_hp, grp.speed, grp.attack_range, grp.step_recovery) == (10, 2, 2, 0.1)
        assert (grp.dead_penalty, grp.attack_penalty) == (-0.1, -0.2)
        assert is_predator(cfg, g)
    for g in (C, D):
        grp = cfg.groups[g]
        assert grp.speed == 2.5 and grp.attack_range == 0 and not is_predator(cfg, g)


def test_desk_scale():
    assert [g.initial_count for g in scenario_by_name("multi_battle").groups] == [16] * 4
    assert [g.initial_count for g in scenario_by_name("predator_prey").groups] == [12, 12, 24, 24]
    assert scenario_by_name("battle_gathering").max_steps == 150
    full = scenario_by_name("multi_battle", scale="full")
    assert full.max_steps == 500 and full.groups[0].initial_count == 72
    assert scenario_by_name("multi_battle", max_steps=7).max_steps == 7
    with pytest.raises(ConfigError):
        scenario_by_name("pursuit")


@pytest.mark.parametrize("name", sorted(BUILDERS))
def test_yaml_roundtrip(tmp_path, name):
    cfg = scenario_by_name(name)
    dump_scenario(cfg, tmp_path / "s.yaml")
    assert load_scenario(tmp_path / "s.yaml") == cfg


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "s.yaml"
    dump_scenario(multi_battle_config(), path)
    path.write_text(path.read_text() + "colour: red\n")
    with pytest.raises(ConfigError):
        load_scenario(path)


def test_validation():
    grp = multi_battle_config().groups[0]
    with pytest.raises(ConfigError):
        dataclasses.replace(grp, max_hp=0)
    with pytest.raises(ConfigError):
        dataclasses.replace(grp, speed=-1)
    with pytest.raises(ConfigError):
        dataclasses.replace(grp, initial_count=0)
    with pytest.raises(ConfigError):
        dataclasses.replace(grp, damage=float("nan"))
    with pytest.raises(ConfigError):
        ScenarioConfig("one", (grp,), 10, 10)
    cfg = multi_battle_config()
    bad = dataclasses.replace(cfg.groups[0], attack_reward=(0.5, 0.2, 0.3, 0.4))
    with pytest.raises(ConfigError):
        dataclasses.replace(cfg, groups=(bad,) + cfg.groups[1:])
    with pytest.raises(ConfigError):
        dataclasses.replace(cfg, mode="psychic")


def test_with_counts():
    cfg = multi_battle_config().with_counts([1, 2, 3, 4])
    assert [g.initial_count for g in cfg.groups] == [1, 2, 3, 4]
    with pytest.raises(ConfigError):
        cfg.with_counts([1, 2])


def test_group_config_is_immutable():
    grp = multi_battle_config().groups[0]
    assert isinstance(grp, GroupConfig)
    with pytest.raises(dataclasses.FrozenInstanceError):
        grp.max_hp = 3
