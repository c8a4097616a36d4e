"""Parameter sets for the three battle games.

All reward and stat values for Multi Team Battle, Battle-Gathering and
Predator-Prey live here. Builders return immutable configs; ``to_dict`` /
``from_dict`` plus the YAML helpers let users derive variants on disk.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import yaml

GROUP_NAMES = ("A", "B", "C", "D")

KNOWN_TYPES = "known_types"
UNKNOWN_TYPES = "unknown_types"


class ConfigError(ValueError):
    """Raised for malformed scenario or run configuration."""


@dataclass(frozen=True)
class GroupConfig:
    max_hp: float
    damage: float
    speed: float
    attack_range: int
    step_recovery: float
    move_penalty: float
    dead_penalty: float
    attack_empty_penalty: float
    attack_penalty: float
    attack_reward: tuple[float, ...]
    kill_reward: tuple[float, ...]
    initial_count: int
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "attack_reward", tuple(float(v) for v in self.attack_reward))
        object.__setattr__(self, "kill_reward", tuple(float(v) for v in self.kill_reward))
        if not self.max_hp > 0:
            raise ConfigError(f"group {self.name!r}: max_hp must be > 0")
        if self.speed < 0:
            raise ConfigError(f"group {self.name!r}: speed must be >= 0")
        if self.attack_range < 0 or int(self.attack_range) != self.attack_range:
            raise ConfigError(f"group {self.name!r}: attack_range must be a nonnegative integer")
        if self.initial_count < 1:
            raise ConfigError(f"group {self.name!r}: initial_count must be >= 1")
        scalars = (self.max_hp, self.damage, self.speed, self.step_recovery, self.move_penalty,
                   self.dead_penalty, self.attack_empty_penalty, self.attack_penalty)
        if not all(math.isfinite(v) for v in scalars + self.attack_reward + self.kill_reward):
            raise ConfigError(f"group {self.name!r}: non-finite reward or stat")


@dataclass(frozen=True)
class FoodSpawn:
    count: int = 0
    hp: float = 4.0
    collect_reward: float = 80.0
    hit_reward: float = 0.5


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    groups: tuple[GroupConfig, ...]
    width: int
    height: int
    max_steps: int = 500
    food: FoodSpawn = field(default_factory=FoodSpawn)
    mode: str = KNOWN_TYPES
    receiver_punishment: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "groups", tuple(self.groups))
        g = len(self.groups)
        if g < 2:
            raise ConfigError("a scenario needs at least 2 groups")
        for i, grp in enumerate(self.groups):
            if len(grp.attack_reward) != g or len(grp.kill_reward) != g:
                raise ConfigError(f"group {i}: reward tables must have one entry per group ({g})")
            if grp.attack_reward[i] != 0 or grp.kill_reward[i] != 0:
                raise ConfigError(f"group {i}: reward tables must have a zero diagonal")
        if self.width < 1 or self.height < 1:
            raise ConfigError("grid dimensions must be positive")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.mode not in (KNOWN_TYPES, UNKNOWN_TYPES):
            raise ConfigError(f"unknown mode {self.mode!r}")

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    def with_counts(self, counts: Sequence[int]) -> "ScenarioConfig":
        if len(counts) != self.num_groups:
            raise ConfigError("need one count per group")
        return replace(self, groups=tuple(replace(g, initial_count=int(c))
                                          for g, c in zip(self.groups, counts)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["groups"] = [dict(g, attack_reward=list(g["attack_reward"]),
                            kill_reward=list(g["kill_reward"])) for g in d["groups"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        allowed = {"name", "groups", "width", "height", "max_steps", "food", "mode",
                   "receiver_punishment"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown scenario key(s): {', '.join(sorted(unknown))}")
        try:
            groups = tuple(GroupConfig(**g) for g in d.pop("groups"))
            food = FoodSpawn(**d.pop("food", {}))
        except TypeError as exc:
            raise ConfigError(f"bad group/food entry: {exc}") from None
        except KeyError:
            raise ConfigError("scenario is missing 'groups'") from None
        return cls(groups=groups, food=food, **d)


def dump_scenario(config: ScenarioConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False), newline="\n")


def load_scenario(path: str | Path) -> ScenarioConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return ScenarioConfig.from_dict(data)


def _cyclic_table(g: int, values: Sequence[float]) -> tuple[float, ...]:
    # group g rewards targets g+1, g+2, g+3 with increasing values; g+3 is the favorable opponent
    row = [0.0] * 4
    for k, v in enumerate(values, start=1):
        row[(g + k) % 4] = v
    return tuple(row)


def multi_battle_config(agents_per_group: int = 72, width: int = 40, height: int = 40,
                        max_steps: int = 500) -> ScenarioConfig:
    groups = tuple(
        GroupConfig(
            name=GROUP_NAMES[g],
            max_hp=10.0,
            damage=2.0,
            speed=1.0,
            attack_range=1,
            step_recovery=0.1,
            move_penalty=-0.01,
            dead_penalty=-1.0,
            attack_empty_penalty=-0.1,
            attack_penalty=0.0,
            attack_reward=_cyclic_table(g, (0.2, 0.3, 0.4)),
            kill_reward=_cyclic_table(g, (80.0, 90.0, 100.0)),
            initial_count=agents_per_group,
        )
        for g in range(4)
    )
    return ScenarioConfig(name="multi_battle", groups=groups, width=width, height=height,
                          max_steps=max_steps)


def battle_gathering_config(agents_per_group: int = 72, width: int = 40, height: int = 40,
                            max_steps: int = 500, food_count: int = 64,
                            food_hp: float = 4.0) -> ScenarioConfig:
    base = multi_battle_config(agents_per_group, width, height, max_steps)
    return replace(base, name="battle_gathering",
                   food=FoodSpawn(count=food_count, hp=food_hp, collect_reward=80.0,
                                  hit_reward=0.5))


def predator_prey_config(counts: Optional[Sequence[int]] = None, width: int = 50,
                         height: int = 50, max_steps: int = 500) -> ScenarioConfig:
    counts = tuple(counts) if counts is not None else (45, 45, 90, 90)
    attack = (
        (0.0, 0.5, 1.0, 3.0),
        (0.5, 0.0, 3.0, 1.0),
        (0.0, 0.0, 0.0, 0.0),
        (0.0, 0.0, 0.0, 0.0),
    )
    groups = []
    for g in range(4):
        predator = g < 2
        kill = tuple(0.0 if t == g else 5.0 for t in range(4))
        groups.append(GroupConfig(
            name=GROUP_NAMES[g],
            max_hp=10.0,
            damage=2.0 if predator else 0.0,
            speed=2.0 if predator else 2.5,
            attack_range=2 if predator else 0,
            step_recovery=0.1,
            move_penalty=0.0,
            dead_penalty=-0.1,
            attack_empty_penalty=0.0,
            attack_penalty=-0.2 if predator else 0.0,
            attack_reward=attack[g],
            kill_reward=kill,
            initial_count=counts[g],
        ))
    return ScenarioConfig(name="predator_prey", groups=tuple(groups), width=width,
                          height=height, max_steps=max_steps, mode=UNKNOWN_TYPES,
                          receiver_punishment=True)


# desk-scale counts used by the harness and CLI unless overridden
DESK_COUNTS = {
    "multi_battle": (16, 16, 16, 16),
    "battle_gathering": (16, 16, 16, 16),
    "predator_prey": (12, 12, 24, 24),
}

BUILDERS = {
    "multi_battle": multi_battle_config,
    "battle_gathering": battle_gathering_config,
    "predator_prey": predator_prey_config,
}


def scenario_by_name(name: str, scale: str = "desk", max_steps: Optional[int] = None) -> ScenarioConfig:
    """Build a named scenario at ``desk`` (reduced) or ``full`` scale."""
    try:
        config = BUILDERS[name]()
    except KeyError:
        raise ConfigError(f"unknown scenario {name!r}; choose from {sorted(BUILDERS)}") from None
    if scale == "desk":
        config = replace(config.with_counts(DESK_COUNTS[name]), max_steps=150)
    elif scale != "full":
        raise ConfigError(f"unknown scale {scale!r}")
    if max_steps is not None:
        config = replace(config, max_steps=int(max_steps))
    return config


def is_predator(config: ScenarioConfig, group: int) -> bool:
    return config.groups[group].attack_range > 0
