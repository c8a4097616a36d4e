"""Deterministic many-agent gridworld.

Agents live on integer cells, move by integer offsets, attack cells within a
Chebyshev range, lose HP to damage and recover a little every step. The world
is array-backed: per-agent quantities are numpy arrays indexed by agent id, and
``WorldState.agents`` materialises :class:`AgentState` records on demand.

``step`` mutates the world in place (single writer) and returns it together
with per-agent rewards and the step's events.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .scenarios import ScenarioConfig

IDLE, MOVE, ATTACK = "idle", "move", "attack"
NUM_SECTORS = 8
HP_LEVELS = 4
DEFAULT_RADIUS = 6


class CapacityError(ValueError):
    """Not enough cells to place every agent and food item."""


@dataclass(frozen=True)
class ActionId:
    index: int
    kind: str
    dx: int = 0
    dy: int = 0

    @property
    def offset(self) -> tuple[int, int]:
        return (self.dx, self.dy)


@dataclass(frozen=True)
class AgentState:
    id: int
    group: int
    pos: tuple[int, int]
    hp: float
    alive: bool
    last_action: ActionId


@dataclass(frozen=True)
class FoodState:
    pos: tuple[int, int]
    hp: float


@dataclass(frozen=True)
class Event:
    step: int
    agent: int
    event: str
    value: float


@dataclass
class Neighborhood:
    center: int
    by_group: dict[int, list[int]]

    @property
    def counts(self) -> dict[int, int]:
        return {g: len(ids) for g, ids in self.by_group.items()}


@lru_cache(maxsize=None)
def _action_table(speed: float, attack_range: int) -> tuple[ActionId, ...]:
    reach = int(math.floor(speed))
    moves = [(dx, dy)
             for dy in range(-reach, reach + 1)
             for dx in range(-reach, reach + 1)
             if (dx, dy) != (0, 0) and dx * dx + dy * dy <= speed * speed + 1e-12]
    attacks = [(dx, dy)
               for dy in range(-attack_range, attack_range + 1)
               for dx in range(-attack_range, attack_range + 1)
               if (dx, dy) != (0, 0)]
    table = [ActionId(0, IDLE)]
    table += [ActionId(len(table) + i, MOVE, dx, dy) for i, (dx, dy) in enumerate(moves)]
    table += [ActionId(len(table) + i, ATTACK, dx, dy) for i, (dx, dy) in enumerate(attacks)]
    return tuple(table)


def legal_actions(config: ScenarioConfig, group: int) -> tuple[ActionId, ...]:
    """Ordered action set: idle, moves (row-major offsets), attacks (row-major offsets)."""
    if not 0 <= group < config.num_groups:
        raise ValueError(f"invalid group {group}")
    g = config.groups[group]
    return _action_table(float(g.speed), int(g.attack_range))


@dataclass(frozen=True)
class ActionVocabulary:
    """Union of all groups' actions, used as the shared mean-action coordinate system."""

    actions: tuple[tuple[str, int, int], ...]
    to_union: tuple[np.ndarray, ...]  # per group: local index -> union index

    @property
    def size(self) -> int:
        return len(self.actions)

    def union_index(self, group: int, local: np.ndarray | int):
        return self.to_union[group][local]


def action_vocabulary(config: ScenarioConfig) -> ActionVocabulary:
    keys = set()
    for g in range(config.num_groups):
        keys.update((a.kind, a.dx, a.dy) for a in legal_actions(config, g))
    rank = {IDLE: 0, MOVE: 1, ATTACK: 2}
    ordered = tuple(sorted(keys, key=lambda k: (rank[k[0]], k[2], k[1])))
    lookup = {k: i for i, k in enumerate(ordered)}
    maps = tuple(np.array([lookup[(a.kind, a.dx, a.dy)] for a in legal_actions(config, g)],
                          dtype=np.int64)
                 for g in range(config.num_groups))
    return ActionVocabulary(ordered, maps)


class _GroupTables:
    """Dense per-group lookup arrays derived from a config (cached per config)."""

    def __init__(self, config: ScenarioConfig) -> None:
        groups = config.groups
        self.max_hp = np.array([g.max_hp for g in groups])
        self.damage = np.array([g.damage for g in groups])
        self.recovery = np.array([g.step_recovery for g in groups])
        self.move_penalty = np.array([g.move_penalty for g in groups])
        self.dead_penalty = np.array([g.dead_penalty for g in groups])
        self.empty_penalty = np.array([g.attack_empty_penalty for g in groups])
        self.attack_penalty = np.array([g.attack_penalty for g in groups])
        self.attack_reward = np.array([g.attack_reward for g in groups])
        self.kill_reward = np.array([g.kill_reward for g in groups])
        tables = [legal_actions(config, g) for g in range(len(groups))]
        width = max(len(t) for t in tables)
        self.n_actions = np.array([len(t) for t in tables])
        self.kind = np.zeros((len(groups), width), dtype=np.int8)  # 0 idle, 1 move, 2 attack
        self.dx = np.zeros((len(groups), width), dtype=np.int64)
        self.dy = np.zeros((len(groups), width), dtype=np.int64)
        code = {IDLE: 0, MOVE: 1, ATTACK: 2}
        for g, table in enumerate(tables):
            for a in table:
                self.kind[g, a.index] = code[a.kind]
                self.dx[g, a.index] = a.dx
                self.dy[g, a.index] = a.dy


_TABLES: dict[int, tuple[ScenarioConfig, _GroupTables]] = {}


def _tables(config: ScenarioConfig) -> _GroupTables:
    hit = _TABLES.get(id(config))
    if hit is None or hit[0] is not config:
        hit = (config, _GroupTables(config))
        _TABLES[id(config)] = hit
    return hit[1]


@dataclass
class WorldState:
    config: ScenarioConfig
    pos: np.ndarray  # (n, 2) int, x then y
    hp: np.ndarray
    alive: np.ndarray
    group: np.ndarray
    last_action: np.ndarray  # local action index per agent
    food_pos: np.ndarray  # (f, 2)
    food_hp: np.ndarray
    food_alive: np.ndarray
    occupancy: np.ndarray  # (width, height): agent id or -1
    food_grid: np.ndarray  # (width, height): food index or -1
    step: int
    rng: np.random.Generator
    last_components: dict = field(default_factory=dict, repr=False)

    @property
    def width(self) -> int:
        return self.config.width

    @property
    def height(self) -> int:
        return self.config.height

    @property
    def num_agents(self) -> int:
        return len(self.hp)

    @property
    def rng_state(self) -> dict:
        return self.rng.bit_generator.state

    @property
    def agents(self) -> list[AgentState]:
        return [self.agent(i) for i in range(self.num_agents)]

    @property
    def food(self) -> list[FoodState]:
        return [FoodState((int(p[0]), int(p[1])), float(h))
                for p, h, a in zip(self.food_pos, self.food_hp, self.food_alive) if a]

    def agent(self, agent_id: int) -> AgentState:
        self._check_id(agent_id)
        table = legal_actions(self.config, int(self.group[agent_id]))
        return AgentState(
            id=agent_id,
            group=int(self.group[agent_id]),
            pos=(int(self.pos[agent_id, 0]), int(self.pos[agent_id, 1])),
            hp=float(self.hp[agent_id]),
            alive=bool(self.alive[agent_id]),
            last_action=table[int(self.last_action[agent_id])],
        )

    def alive_ids(self) -> np.ndarray:
        return np.flatnonzero(self.alive)

    def alive_counts(self) -> np.ndarray:
        return np.bincount(self.group[self.alive], minlength=self.config.num_groups)

    def is_done(self) -> bool:
        return (self.step >= self.config.max_steps
                or int(np.count_nonzero(self.alive_counts())) <= 1)

    def copy(self) -> "WorldState":
        return copy.deepcopy(self)

    def _check_id(self, agent_id: int) -> None:
        if not 0 <= agent_id < self.num_agents:
            raise KeyError(f"unknown agent id {agent_id}")

    def _check_alive(self, agent_id: int) -> None:
        self._check_id(agent_id)
        if not self.alive[agent_id]:
            raise ValueError(f"agent {agent_id} is dead")


def _spawn_regions(width: int, height: int, groups: int) -> list[tuple[int, int, int, int]]:
    cols = math.ceil(math.sqrt(groups))
    rows = math.ceil(groups / cols)
    xs = np.linspace(0, width, cols + 1).astype(int)
    ys = np.linspace(0, height, rows + 1).astype(int)
    regions = []
    for g in range(groups):
        r, c = divmod(g, cols)
        regions.append((xs[c], xs[c + 1], ys[r], ys[r + 1]))
    return regions


def reset(config: ScenarioConfig, seed: int) -> WorldState:
    """Place every group in its own spawn quadrant and scatter food over free cells."""
    counts = [g.initial_count for g in config.groups]
    n = sum(counts)
    cells = config.width * config.height
    if n + config.food.count > cells:
        raise CapacityError(f"{n} agents + {config.food.count} food exceed {cells} cells")
    rng = np.random.default_rng(seed)
    occupancy = np.full((config.width, config.height), -1, dtype=np.int64)
    pos = np.zeros((n, 2), dtype=np.int64)
    group = np.repeat(np.arange(config.num_groups), counts)
    regions = _spawn_regions(config.width, config.height, config.num_groups)
    start = 0
    for g, (x0, x1, y0, y1) in enumerate(regions):
        region_cells = (x1 - x0) * (y1 - y0)
        if counts[g] > region_cells:
            raise CapacityError(f"group {g} needs {counts[g]} cells, spawn region has {region_cells}")
        flat = rng.choice(region_cells, size=counts[g], replace=False)
        pos[start:start + counts[g], 0] = x0 + flat % (x1 - x0)
        pos[start:start + counts[g], 1] = y0 + flat // (x1 - x0)
        start += counts[g]
    occupancy[pos[:, 0], pos[:, 1]] = np.arange(n)

    food_grid = np.full_like(occupancy, -1)
    free = np.flatnonzero(occupancy.ravel() == -1)
    chosen = np.sort(rng.choice(free, size=config.food.count, replace=False))
    food_pos = np.stack([chosen // config.height, chosen % config.height], axis=1).astype(np.int64)
    food_pos = food_pos.reshape(-1, 2)
    food_grid[food_pos[:, 0], food_pos[:, 1]] = np.arange(len(food_pos))

    tables = _tables(config)
    return WorldState(
        config=config,
        pos=pos,
        hp=tables.max_hp[group].astype(float),
        alive=np.ones(n, dtype=bool),
        group=group,
        last_action=np.zeros(n, dtype=np.int64),
        food_pos=food_pos,
        food_hp=np.full(len(food_pos), float(config.food.hp)),
        food_alive=np.ones(len(food_pos), dtype=bool),
        occupancy=occupancy,
        food_grid=food_grid,
        step=0,
        rng=rng,
    )


def make_world(config: ScenarioConfig, positions: Sequence[tuple[int, int]],
               groups: Sequence[int], food: Sequence[tuple[int, int]] = (),
               hp: Optional[Sequence[float]] = None, seed: int = 0) -> WorldState:
    """World with hand-placed agents and food (ignores the config's spawn counts)."""
    n = len(positions)
    if len(groups) != n:
        raise ValueError("need one group per position")
    pos = np.array(positions, dtype=np.int64).reshape(n, 2)
    group = np.array(groups, dtype=np.int64)
    occupancy = np.full((config.width, config.height), -1, dtype=np.int64)
    food_grid = np.full_like(occupancy, -1)
    for i, (x, y) in enumerate(pos.tolist()):
        if occupancy[x, y] >= 0:
            raise ValueError(f"two agents on cell {(x, y)}")
        occupancy[x, y] = i
    food_pos = np.array(food, dtype=np.int64).reshape(-1, 2)
    for k, (x, y) in enumerate(food_pos.tolist()):
        if occupancy[x, y] >= 0 or food_grid[x, y] >= 0:
            raise ValueError(f"cell {(x, y)} is taken")
        food_grid[x, y] = k
    t = _tables(config)
    hp_arr = t.max_hp[group].astype(float) if hp is None else np.array(hp, dtype=float)
    return WorldState(config, pos, hp_arr, np.ones(n, dtype=bool), group,
                      np.zeros(n, dtype=np.int64), food_pos,
                      np.full(len(food_pos), float(config.food.hp)),
                      np.ones(len(food_pos), dtype=bool), occupancy, food_grid, 0,
                      np.random.default_rng(seed))


JointActions = Union[Mapping[int, Union[int, ActionId]], np.ndarray]


def _action_array(world: WorldState, joint_actions: JointActions) -> np.ndarray:
    tables = _tables(world.config)
    n = world.num_agents
    if isinstance(joint_actions, np.ndarray):
        actions = np.asarray(joint_actions, dtype=np.int64).copy()
        if actions.shape != (n,):
            raise ValueError(f"action array must have shape ({n},)")
    else:
        actions = np.full(n, -1, dtype=np.int64)
        for agent_id, a in joint_actions.items():
            agent_id = int(agent_id)
            if not 0 <= agent_id < n:
                raise KeyError(f"unknown agent id {agent_id}")
            actions[agent_id] = a.index if isinstance(a, ActionId) else int(a)
    live = world.alive
    bad = live & ((actions < 0) | (actions >= tables.n_actions[world.group]))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"illegal or missing action {int(actions[i])} for agent {i} "
                         f"(group {int(world.group[i])})")
    actions[~live] = 0
    return actions


def step(world: WorldState, joint_actions: JointActions):
    """Advance one tick. Returns ``(world, rewards, events)``; rewards indexed by agent id."""
    config = world.config
    t = _tables(config)
    actions = _action_array(world, joint_actions)
    n = world.num_agents
    live = world.alive.copy()
    grp = world.group
    kind = t.kind[grp, actions]
    kind[~live] = 0

    comp = {k: np.zeros(n) for k in ("move", "attack", "receiver", "penalty", "kill", "dead", "food")}
    events: list[Event] = []

    # attacks: targets and damage from pre-step state, applied simultaneously
    attackers = np.flatnonzero(kind == 2)
    hit_att = hit_vic = np.zeros(0, dtype=np.int64)
    food_att = food_idx = np.zeros(0, dtype=np.int64)
    if attackers.size:
        tx = world.pos[attackers, 0] + t.dx[grp[attackers], actions[attackers]]
        ty = world.pos[attackers, 1] + t.dy[grp[attackers], actions[attackers]]
        inside = (tx >= 0) & (tx < config.width) & (ty >= 0) & (ty < config.height)
        victim = np.full(attackers.size, -1, dtype=np.int64)
        food = np.full(attackers.size, -1, dtype=np.int64)
        victim[inside] = world.occupancy[tx[inside], ty[inside]]
        food[inside] = world.food_grid[tx[inside], ty[inside]]
        comp["penalty"][attackers] += t.attack_penalty[grp[attackers]]
        empty = (victim < 0) & (food < 0)
        comp["penalty"][attackers[empty]] += t.empty_penalty[grp[attackers[empty]]]

        on_agent = victim >= 0
        hit_att, hit_vic = attackers[on_agent], victim[on_agent]
        reward = t.attack_reward[grp[hit_att], grp[hit_vic]]
        np.add.at(comp["attack"], hit_att, reward)
        if config.receiver_punishment:
            np.add.at(comp["receiver"], hit_vic, -reward)
        damage = np.zeros(n)
        np.add.at(damage, hit_vic, t.damage[grp[hit_att]])
        world.hp = world.hp - damage

        on_food = (victim < 0) & (food >= 0)
        food_att, food_idx = attackers[on_food], food[on_food]
        comp["food"][food_att] += config.food.hit_reward
        food_damage = np.zeros(len(world.food_hp))
        np.add.at(food_damage, food_idx, t.damage[grp[food_att]])
        world.food_hp = world.food_hp - food_damage

    died = live & (world.hp <= 0)
    if died.any():
        world.hp[died] = 0.0
        world.alive[died] = False
        world.occupancy[world.pos[died, 0], world.pos[died, 1]] = -1
        comp["dead"][died] += t.dead_penalty[grp[died]]
        lethal = died[hit_vic]
        kill_att, kill_vic = hit_att[lethal], hit_vic[lethal]
        np.add.at(comp["kill"], kill_att, t.kill_reward[grp[kill_att], grp[kill_vic]])
        for a, v in zip(kill_att.tolist(), kill_vic.tolist()):
            events.append(Event(world.step, a, "kill", float(v)))
        for v in np.flatnonzero(died).tolist():
            events.append(Event(world.step, v, "death", float(grp[v])))

    if food_idx.size:
        eaten = world.food_alive & (world.food_hp <= 0)
        if eaten.any():
            collectors = food_att[eaten[food_idx]]
            comp["food"][collectors] += config.food.collect_reward
            for a, f in zip(collectors.tolist(), food_idx[eaten[food_idx]].tolist()):
                events.append(Event(world.step, a, "collect", float(f)))
            world.food_alive[eaten] = False
            world.food_hp[eaten] = 0.0
            gone = world.food_pos[eaten]
            world.food_grid[gone[:, 0], gone[:, 1]] = -1

    # moves: seeded random order, blocked moves are no-ops
    movers = np.flatnonzero((kind == 1) & world.alive)
    comp["move"][np.flatnonzero(kind == 1)] += t.move_penalty[grp[kind == 1]]
    if movers.size:
        order = world.rng.permutation(movers)
        occ, fgrid = world.occupancy, world.food_grid
        w, h = config.width, config.height
        dxs = t.dx[grp[order], actions[order]].tolist()
        dys = t.dy[grp[order], actions[order]].tolist()
        xs = world.pos[order, 0].tolist()
        ys = world.pos[order, 1].tolist()
        for i, a in enumerate(order.tolist()):
            nx, ny = xs[i] + dxs[i], ys[i] + dys[i]
            if 0 <= nx < w and 0 <= ny < h and occ[nx, ny] < 0 and fgrid[nx, ny] < 0:
                occ[xs[i], ys[i]] = -1
                occ[nx, ny] = a
                world.pos[a, 0] = nx
                world.pos[a, 1] = ny

    alive = world.alive
    world.hp[alive] = np.minimum(t.max_hp[grp[alive]], world.hp[alive] + t.recovery[grp[alive]])
    world.last_action[live] = actions[live]
    world.step += 1
    world.last_components = comp
    rewards = sum(comp.values())
    return world, rewards, events


def write_event_log(events: Iterable[Event], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "agent", "event", "value"])
        for e in events:
            writer.writerow([e.step, e.agent, e.event, repr(float(e.value))])


def neighbor_matrix(world: WorldState, radius: int = DEFAULT_RADIUS) -> np.ndarray:
    """(n, n) bool: alive j within Chebyshev ``radius`` of alive i, i != j."""
    d = np.abs(world.pos[:, None, :] - world.pos[None, :, :]).max(axis=2)
    m = (d <= radius) & world.alive[:, None] & world.alive[None, :]
    np.fill_diagonal(m, False)
    return m


def neighborhood(world: WorldState, agent_id: int, radius: int = DEFAULT_RADIUS,
                 labels: Optional[Sequence[int]] = None,
                 num_labels: Optional[int] = None) -> Neighborhood:
    """Alive agents within ``radius`` of ``agent_id``, partitioned by group or by ``labels``."""
    world._check_alive(agent_id)
    if labels is None:
        part = world.group
        k = world.config.num_groups
    else:
        part = np.asarray(labels)
        k = int(num_labels) if num_labels is not None else int(part.max()) + 1
    d = np.abs(world.pos - world.pos[agent_id]).max(axis=1)
    near = (d <= radius) & world.alive
    near[agent_id] = False
    ids = np.flatnonzero(near)
    return Neighborhood(agent_id, {m: ids[part[ids] == m].tolist() for m in range(k)})


def patch_offsets(config: ScenarioConfig) -> list[tuple[int, int]]:
    """Cells of the local patch: the widest attack window (at least 3x3), row-major, centre excluded."""
    r = max(1, max(g.attack_range for g in config.groups))
    return [(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if (dx, dy) != (0, 0)]


def observation_size(config: ScenarioConfig) -> int:
    patch = len(patch_offsets(config)) * (config.num_groups + 1)
    return config.num_groups * NUM_SECTORS + 1 + HP_LEVELS + 2 + patch


def observe_all(world: WorldState, radius: int = DEFAULT_RADIUS) -> np.ndarray:
    """Observation rows for every agent; rows of dead agents are zero.

    Layout: per-group alive counts in 8 angular sectors of the Chebyshev window
    (sector 0 centred on +x, counter-clockwise towards +y), food count in the
    window, one-hot HP quartile, position scaled to [0, 1], then a local patch
    over :func:`patch_offsets` with one-hot occupant (group ids, then food) per cell.
    """
    config = world.config
    n, g = world.num_agents, config.num_groups
    obs = np.zeros((n, observation_size(config)))
    alive = world.alive
    if not alive.any():
        return obs
    diff = world.pos[None, :, :] - world.pos[:, None, :]  # [i, j] = pos_j - pos_i
    near = neighbor_matrix(world, radius)
    ii, jj = np.nonzero(near)
    if ii.size:
        ang = np.arctan2(diff[ii, jj, 1], diff[ii, jj, 0])
        sector = np.floor((ang + np.pi / NUM_SECTORS) / (2 * np.pi / NUM_SECTORS)).astype(np.int64) % NUM_SECTORS
        np.add.at(obs, (ii, world.group[jj] * NUM_SECTORS + sector), 1.0)
    if world.food_alive.any():
        fpos = world.food_pos[world.food_alive]
        fd = np.abs(world.pos[:, None, :] - fpos[None, :, :]).max(axis=2)
        obs[:, g * NUM_SECTORS] = (fd <= radius).sum(axis=1)
    t = _tables(config)
    frac = world.hp / t.max_hp[world.group]
    level = np.clip(np.floor(frac * HP_LEVELS).astype(np.int64), 0, HP_LEVELS - 1)
    obs[np.arange(n), g * NUM_SECTORS + 1 + level] = 1.0
    base = g * NUM_SECTORS + 1 + HP_LEVELS
    obs[:, base] = world.pos[:, 0] / max(1, config.width - 1)
    obs[:, base + 1] = world.pos[:, 1] / max(1, config.height - 1)
    obs[:, base + 2:] = _local_patch(world).reshape(n, -1)
    obs[~alive] = 0.0
    return obs


def _local_patch(world: WorldState) -> np.ndarray:
    config = world.config
    g = config.num_groups
    offs = np.array(patch_offsets(config), dtype=np.int64)
    cells = world.pos[:, None, :] + offs[None, :, :]
    inside = ((cells[..., 0] >= 0) & (cells[..., 0] < config.width)
              & (cells[..., 1] >= 0) & (cells[..., 1] < config.height))
    cx = np.clip(cells[..., 0], 0, config.width - 1)
    cy = np.clip(cells[..., 1], 0, config.height - 1)
    occ = np.where(inside, world.occupancy[cx, cy], -1)
    food = np.where(inside, world.food_grid[cx, cy], -1)
    patch = np.zeros(occ.shape + (g + 1,))
    ai, ci = np.nonzero(occ >= 0)
    patch[ai, ci, world.group[occ[ai, ci]]] = 1.0
    patch[..., g] = food >= 0
    return patch


def observe(world: WorldState, agent_id: int, radius: int = DEFAULT_RADIUS) -> np.ndarray:
    world._check_alive(agent_id)
    return observe_all(world, radius)[agent_id]
