import csv
import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtmfq import engine
from mtmfq.engine import ATTACK, IDLE, MOVE, CapacityError, make_world, step
from mtmfq.scenarios import (GroupConfig, ScenarioConfig, battle_gathering_config,
                             multi_battle_config, predator_prey_config)

from .conftest import action_index, idle_actions


def _still_group(**kw):
    base = dict(max_hp=10, damage=1, speed=0, attack_range=0, step_recovery=0, move_penalty=0,
                dead_penalty=0, attack_empty_penalty=0, attack_penalty=0,
                attack_reward=(0, 0), kill_reward=(0, 0), initial_count=1)
    base.update(kw)
    return GroupConfig(**base)


# -- legal actions -----------------------------------------------------------

def test_speed_one_range_one_has_thirteen_actions():
    config = multi_battle_config()
    acts = engine.legal_actions(config, 0)
    assert len(acts) == 1 + 4 + 8
    assert [a.kind for a in acts].count(MOVE) == 4
    assert [a.kind for a in acts].count(ATTACK) == 8


def test_action_order_idle_moves_attacks_row_major():
    acts = engine.legal_actions(multi_battle_config(), 0)
    assert acts[0].kind == IDLE
    assert [(a.dx, a.dy) for a in acts[1:5]] == [(0, -1), (-1, 0), (1, 0), (0, 1)]
    attacks = [(a.dx, a.dy) for a in acts[5:]]
    assert attacks == sorted(attacks, key=lambda o: (o[1], o[0]))
    assert [a.index for a in acts] == list(range(len(acts)))


def test_prey_have_no_attacks_and_outrun_predators():
    config = predator_prey_config()
    prey = engine.legal_actions(config, 2)
    pred = engine.legal_actions(config, 0)
    assert not any(a.kind == ATTACK for a in prey)
    moves = lambda acts: sum(a.kind == MOVE for a in acts)
    assert moves(pred) == 12 and moves(prey) == 20
    assert len(pred) == 1 + 12 + 24
    for a in prey:
        assert np.hypot(a.dx, a.dy) <= 2.5


def test_speed_zero_range_zero_is_idle_only():
    config = ScenarioConfig("still", (_still_group(), _still_group()), 3, 3)
    assert [a.kind for a in engine.legal_actions(config, 0)] == [IDLE]


def test_invalid_group_rejected():
    with pytest.raises(ValueError):
        engine.legal_actions(multi_battle_config(), 4)


def test_vocabulary_is_union_of_group_actions():
    config = predator_prey_config()
    vocab = engine.action_vocabulary(config)
    assert vocab.size == 1 + 20 + 24
    for g in range(4):
        keys = [vocab.actions[i] for i in vocab.to_union[g]]
        assert keys == [(a.kind, a.dx, a.dy) for a in engine.legal_actions(config, g)]


# -- reset -------------------------------------------------------------------

def test_reset_places_all_agents_on_distinct_cells():
    config = multi_battle_config(agents_per_group=16)
    world = engine.reset(config, 7)
    assert world.alive.sum() == 64
    assert len({tuple(p) for p in world.pos.tolist()}) == 64
    assert np.all(world.hp == 10) and world.step == 0


def test_reset_uses_disjoint_group_quadrants():
    world = engine.reset(multi_battle_config(agents_per_group=16), 7)
    for g in range(4):
        p = world.pos[world.group == g]
        qx, qy = g % 2, g // 2
        assert np.all(p[:, 0] // 20 == qx) and np.all(p[:, 1] // 20 == qy)


def test_reset_is_deterministic():
    config = battle_gathering_config(agents_per_group=16)
    a, b = engine.reset(config, 7), engine.reset(config, 7)
    assert np.array_equal(a.pos, b.pos)
    assert np.array_equal(a.food_pos, b.food_pos)
    assert a.rng_state == b.rng_state
    assert not np.array_equal(a.pos, engine.reset(config, 8).pos)


def test_reset_capacity_error():
    groups = (_still_group(), _still_group())
    config = ScenarioConfig("tiny", groups, 1, 1,
                            food=dataclasses.replace(battle_gathering_config().food, count=1))
    with pytest.raises(CapacityError):
        engine.reset(config, 0)


# -- step ----------------------------------------------------------------------

def test_attack_deals_damage(battle):
    world = make_world(battle, [(3, 3), (4, 3)], [0, 3])
    atk = action_index(battle, 0, ATTACK, 1, 0)
    world, rewards, _ = step(world, {0: atk, 1: 0})
    # 10 - 2 damage, then 0.1 recovery
    assert world.hp[1] == pytest.approx(8.1)
    assert world.last_components["attack"][0] == pytest.approx(0.4)


def test_attack_damage_before_recovery(battle):
    no_rec = dataclasses.replace(battle, groups=tuple(
        dataclasses.replace(g, step_recovery=0.0) for g in battle.groups))
    world = make_world(no_rec, [(3, 3), (4, 3)], [0, 3])
    world, _, _ = step(world, {0: action_index(no_rec, 0, ATTACK, 1, 0), 1: 0})
    assert world.hp[1] == 8.0


def test_move_penalty(battle):
    world = make_world(battle, [(3, 3), (9, 9)], [0, 1])
    world, rewards, _ = step(world, {0: action_index(battle, 0, MOVE, 1, 0), 1: 0})
    assert rewards[0] == pytest.approx(-0.01)
    assert world.last_components["move"][0] == -0.01
    assert tuple(world.pos[0]) == (4, 3)


def test_killing_blow_rewards(battle):
    world = make_world(battle, [(3, 3), (4, 3)], [0, 3], hp=[10, 2])
    world, rewards, events = step(world, {0: action_index(battle, 0, ATTACK, 1, 0), 1: 0})
    assert not world.alive[1]
    assert world.last_components["kill"][0] == 100
    assert world.last_components["dead"][1] == -1
    assert rewards[0] == pytest.approx(100.4)
    assert {(e.agent, e.event) for e in events} == {(0, "kill"), (1, "death")}
    assert world.occupancy[4, 3] == -1


def test_attacks_resolve_simultaneously(battle):
    world = make_world(battle, [(3, 3), (4, 3)], [0, 1], hp=[2, 2])
    world, _, _ = step(world, {0: action_index(battle, 0, ATTACK, 1, 0),
                               1: action_index(battle, 1, ATTACK, -1, 0)})
    assert not world.alive.any()
    # B kills A (B's favourable opponent) and A kills B (worth 80 to A)
    assert world.last_components["kill"].tolist() == [80.0, 100.0]


def test_every_damaging_attacker_gets_kill_credit(battle):
    world = make_world(battle, [(3, 3), (5, 3), (4, 3)], [0, 0, 3], hp=[10, 10, 3])
    acts = {0: action_index(battle, 0, ATTACK, 1, 0), 1: action_index(battle, 0, ATTACK, -1, 0), 2: 0}
    world, _, _ = step(world, acts)
    assert world.last_components["kill"][:2].tolist() == [100.0, 100.0]


def test_attack_empty_cell_penalty(battle):
    world = make_world(battle, [(3, 3), (9, 9)], [0, 1])
    world, rewards, _ = step(world, {0: action_index(battle, 0, ATTACK, 0, 1), 1: 0})
    assert rewards[0] == pytest.approx(-0.1)


def test_conflicting_moves_one_wins(battle):
    world = make_world(battle, [(3, 3), (5, 3)], [0, 1])
    acts = {0: action_index(battle, 0, MOVE, 1, 0), 1: action_index(battle, 1, MOVE, -1, 0)}
    world, _, _ = step(world, acts)
    cells = {tuple(p) for p in world.pos.tolist()}
    assert (4, 3) in cells and len(cells) == 2


def test_move_into_occupied_cell_is_noop(battle):
    world = make_world(battle, [(3, 3), (4, 3)], [0, 1])
    world, _, _ = step(world, {0: action_index(battle, 0, MOVE, 1, 0), 1: 0})
    assert tuple(world.pos[0]) == (3, 3)


def test_food_hits_and_collection():
    config = dataclasses.replace(battle_gathering_config(agents_per_group=1), width=8, height=8)
    world = make_world(config, [(2, 2), (4, 2), (7, 7)], [0, 1, 2], food=[(3, 2)])
    acts = {0: action_index(config, 0, ATTACK, 1, 0), 1: action_index(config, 1, ATTACK, -1, 0), 2: 0}
    world, rewards, events = step(world, acts)
    # food hp 4, two hits of damage 2 -> collected by both attackers
    assert rewards[0] == pytest.approx(80.5) and rewards[1] == pytest.approx(80.5)
    assert world.food == [] and world.food_grid[3, 2] == -1
    assert sum(e.event == "collect" for e in events) == 2


def test_single_food_hit(battle):
    config = dataclasses.replace(battle_gathering_config(agents_per_group=1), width=8, height=8)
    world = make_world(config, [(2, 2), (7, 7)], [0, 1], food=[(3, 2)])
    world, rewards, _ = step(world, {0: action_index(config, 0, ATTACK, 1, 0), 1: 0})
    assert rewards[0] == pytest.approx(0.5)
    assert world.food[0].hp == 2


def test_predator_attack_punishes_receiver(prey_config):
    world = make_world(prey_config, [(3, 3), (5, 3)], [0, 3])
    world, rewards, _ = step(world, {0: action_index(prey_config, 0, ATTACK, 2, 0), 1: 0})
    assert world.last_components["attack"][0] == 3.0
    assert world.last_components["receiver"][1] == -3.0
    assert rewards[0] == pytest.approx(3.0 - 0.2)


def test_errors_for_bad_actions(battle):
    world = make_world(battle, [(3, 3), (9, 9)], [0, 1])
    with pytest.raises(KeyError):
        step(world.copy(), {0: 0, 1: 0, 5: 0})
    with pytest.raises(ValueError):
        step(world.copy(), {0: 13, 1: 0})
    with pytest.raises(ValueError):
        step(world.copy(), {0: 0})


def test_all_idle_changes_only_hp_and_step():
    config = multi_battle_config(agents_per_group=16)
    world = engine.reset(config, 3)
    world.hp[:] = 5.0
    before = world.copy()
    world, rewards, events = step(world, idle_actions(world))
    assert world.step == before.step + 1
    assert np.all(world.hp == 5.1)
    assert np.array_equal(world.pos, before.pos) and np.array_equal(world.alive, before.alive)
    assert world.rng_state == before.rng_state
    assert not rewards.any() and events == []


def _random_actions(world, rng):
    t = engine._tables(world.config)
    return {int(i): int(rng.integers(t.n_actions[world.group[i]])) for i in world.alive_ids()}


def test_permuted_action_dict_gives_identical_state():
    config = multi_battle_config(agents_per_group=16)
    a = engine.reset(dataclasses.replace(config, width=14, height=14), 5)
    b = a.copy()
    rng = np.random.default_rng(0)
    for _ in range(20):
        acts = _random_actions(a, rng)
        shuffled = dict(sorted(acts.items(), key=lambda kv: -kv[0]))
        a, ra, _ = step(a, acts)
        b, rb, _ = step(b, shuffled)
        assert np.array_equal(a.pos, b.pos) and np.array_equal(a.hp, b.hp)
        assert np.array_equal(ra, rb)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scenario=st.sampled_from(["battle", "prey", "food"]))
def test_world_invariants_under_random_play(seed, scenario):
    if scenario == "battle":
        config = dataclasses.replace(multi_battle_config(agents_per_group=8), width=10, height=10)
    elif scenario == "food":
        config = dataclasses.replace(battle_gathering_config(agents_per_group=6, food_count=10),
                                     width=10, height=10)
    else:
        config = predator_prey_config(counts=(4, 4, 6, 6), width=12, height=12)
    world = engine.reset(config, seed)
    rng = np.random.default_rng(seed)
    max_hp = np.array([g.max_hp for g in config.groups])
    alive_before = world.alive.sum()
    for t in range(30):
        world, rewards, _ = step(world, _random_actions(world, rng))
        assert world.step == t + 1
        alive = world.alive
        assert alive.sum() <= alive_before
        alive_before = alive.sum()
        assert len({tuple(p) for p in world.pos[alive].tolist()}) == alive.sum()
        assert np.all(world.hp >= 0) and np.all(world.hp <= max_hp[world.group])
        assert np.all(world.hp[~alive] == 0)
        assert np.all(np.isfinite(rewards))
        occ = world.occupancy
        assert np.array_equal(np.sort(occ[occ >= 0]), np.flatnonzero(alive))
        if config.receiver_punishment:
            c = world.last_components
            assert abs(c["attack"].sum() + c["receiver"].sum()) < 1e-12


def test_seeded_runs_are_bit_identical():
    config = dataclasses.replace(multi_battle_config(agents_per_group=8), width=10, height=10)
    out = []
    for _ in range(2):
        world = engine.reset(config, 11)
        rng = np.random.default_rng(3)
        total = np.zeros(world.num_agents)
        for _ in range(25):
            world, r, _ = step(world, _random_actions(world, rng))
            total += r
        out.append((world.pos.copy(), world.hp.copy(), total))
    assert all(np.array_equal(x, y) for x, y in zip(*out))


def test_done_when_one_group_left(battle):
    world = make_world(battle, [(3, 3), (4, 3)], [0, 3], hp=[10, 2])
    assert not world.is_done()
    world, _, _ = step(world, {0: action_index(battle, 0, ATTACK, 1, 0), 1: 0})
    assert world.is_done()


def test_agent_records(battle):
    world = make_world(battle, [(3, 3), (9, 9)], [0, 1])
    world, _, _ = step(world, {0: action_index(battle, 0, MOVE, 0, 1), 1: 0})
    a = world.agents[0]
    assert a.pos == (3, 4) and a.alive and a.last_action.kind == MOVE
    with pytest.raises(KeyError):
        world.agent(7)


# -- observation & neighbourhood ------------------------------------------------

def test_observe_alone_is_empty(battle):
    world = make_world(battle, [(3, 3)], [0])
    obs = engine.observe(world, 0, 6)
    assert not obs[:4 * 8 + 1].any()
    assert obs.shape == (engine.observation_size(battle),)
    assert np.all(np.isfinite(obs))


def test_observe_enemy_due_east():
    config = dataclasses.replace(multi_battle_config(), width=9, height=9)
    world = make_world(config, [(2, 4), (4, 4)], [0, 2])
    obs = engine.observe(world, 0, 6)
    counts = obs[:4 * 8]
    assert np.count_nonzero(counts) == 1
    assert counts[2 * 8 + 0] == 1  # group 2's block, sector 0 (+x)


def test_observe_sectors_go_counterclockwise():
    config = dataclasses.replace(multi_battle_config(), width=9, height=9)
    world = make_world(config, [(4, 4), (4, 6), (2, 4), (2, 2)], [0, 1, 1, 1])
    counts = engine.observe(world, 0, 6)[8:16]
    assert counts.tolist() == [0, 0, 1, 0, 1, 1, 0, 0]


def test_observe_is_deterministic_and_counts_food():
    config = dataclasses.replace(battle_gathering_config(agents_per_group=1), width=9, height=9)
    world = make_world(config, [(2, 2), (8, 8)], [0, 1], food=[(3, 3), (8, 0)])
    a, b = engine.observe(world, 0, 3), engine.observe(world, 0, 3)
    assert np.array_equal(a, b)
    assert a[4 * 8] == 1


def test_observe_hp_bucket_and_position(battle):
    world = make_world(battle, [(0, 0), (11, 11)], [0, 1], hp=[2.4, 10])
    obs = engine.observe_all(world, 6)
    hp = obs[:, 33:37]
    assert hp[0].tolist() == [1, 0, 0, 0] and hp[1].tolist() == [0, 0, 0, 1]
    assert obs[1, 37:39].tolist() == [1.0, 1.0]


def test_local_patch_marks_adjacent_occupants():
    config = dataclasses.replace(battle_gathering_config(agents_per_group=1), width=9, height=9)
    world = make_world(config, [(4, 4), (5, 4), (3, 3), (8, 8)], [0, 3, 0, 1], food=[(4, 5)])
    obs = engine.observe(world, 0, 6)
    offsets = engine.patch_offsets(config)
    assert len(offsets) == 8
    patch = obs[39:].reshape(8, 5)
    expect = {(1, 0): 3, (-1, -1): 0, (0, 1): 4}
    for k, off in enumerate(offsets):
        hot = np.flatnonzero(patch[k]).tolist()
        assert hot == ([expect[off]] if off in expect else [])


def test_local_patch_covers_predator_range(prey_config):
    assert len(engine.patch_offsets(prey_config)) == 24
    world = make_world(prey_config, [(0, 0), (2, 2)], [0, 2])
    patch = engine.observe(world, 0, 6)[4 * 8 + 7:].reshape(24, 5)
    k = engine.patch_offsets(prey_config).index((2, 2))
    assert patch[k].tolist() == [0, 0, 1, 0, 0]
    assert patch.sum() == 1  # cells off the grid stay empty


def test_observe_dead_agent_errors(battle):
    world = make_world(battle, [(3, 3), (4, 3)], [0, 3], hp=[10, 2])
    world, _, _ = step(world, {0: action_index(battle, 0, ATTACK, 1, 0), 1: 0})
    with pytest.raises(ValueError):
        engine.observe(world, 1)
    with pytest.raises(KeyError):
        engine.observe(world, 9)
    with pytest.raises(ValueError):
        engine.neighborhood(world, 1)


def test_neighborhood_counts():
    config = dataclasses.replace(multi_battle_config(), width=12, height=12)
    pos = [(5, 5), (6, 5), (4, 4), (7, 7), (5, 8), (3, 6), (11, 11)]
    grp = [0, 0, 0, 1, 1, 1, 1]
    world = make_world(config, pos, grp)
    nb = engine.neighborhood(world, 0, 3)
    assert nb.counts == {0: 2, 1: 3, 2: 0, 3: 0}
    assert sorted(nb.by_group[1]) == [3, 4, 5]


def test_neighborhood_empty_and_radius_zero(battle):
    world = make_world(battle, [(0, 0), (11, 11)], [0, 1])
    assert sum(engine.neighborhood(world, 0, 6).counts.values()) == 0
    world = make_world(battle, [(0, 0), (0, 1)], [0, 1])
    assert sum(engine.neighborhood(world, 0, 0).counts.values()) == 0


def test_neighborhood_by_labels(battle):
    world = make_world(battle, [(0, 0), (0, 1), (1, 0)], [0, 1, 1])
    nb = engine.neighborhood(world, 0, 2, labels=[0, 0, 1], num_labels=2)
    assert nb.by_group == {0: [1], 1: [2]}


def test_event_log_csv(tmp_path, battle):
    world = make_world(battle, [(3, 3), (4, 3)], [0, 3], hp=[10, 2])
    _, _, events = step(world, {0: action_index(battle, 0, ATTACK, 1, 0), 1: 0})
    path = tmp_path / "events.csv"
    engine.write_event_log(events, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["step", "agent", "event", "value"]
    assert ["0", "0", "kill", "1.0"] in rows
