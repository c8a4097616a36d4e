import dataclasses

import numpy as np
import pytest

from mtmfq import engine
from mtmfq.scenarios import multi_battle_config, predator_prey_config


def action_index(config, group, kind, dx=0, dy=0):
    for a in engine.legal_actions(config, group):
        if a.kind == kind and (a.dx, a.dy) == (dx, dy):
            return a.index
    raise LookupError((kind, dx, dy))


def idle_actions(world):
    return {int(i): 0 for i in world.alive_ids()}


@pytest.fixture
def battle():
    return dataclasses.replace(multi_battle_config(agents_per_group=16), width=12, height=12)


@pytest.fixture
def prey_config():
    return predator_prey_config(counts=(4, 4, 6, 6), width=16, height=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
