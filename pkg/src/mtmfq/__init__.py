"""Multi-type mean-field Q-learning for many-agent gridworld battles."""

from .learning import IL, MFQ, MTMFQ, Hyperparams, QModel, load_model, save_model
from .scenarios import (ScenarioConfig, battle_gathering_config, multi_battle_config,
                        predator_prey_config, scenario_by_name)

__all__ = [
    "IL", "MFQ", "MTMFQ", "Hyperparams", "QModel", "ScenarioConfig", "battle_gathering_config",
    "load_model", "multi_battle_config", "predator_prey_config", "save_model", "scenario_by_name",
]
__version__ = "0.1.0"
