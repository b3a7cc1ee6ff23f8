"""Deterministic simulator of multi-agent backdoor poisoning games.

N non-colluding attackers plant unique randomized triggers in a shared
training pool, one defender trains a classifier on it, and the package
measures per-attacker attack success rate and defender accuracy under
several defenses (data augmentation, agent augmentation, agent indexing).
"""

from poisonpool.data import DatasetSpec, LabeledImage, SubDataset
from poisonpool.game import AttackerSpec, GameConfig, GameResult, run_game
from poisonpool.trigger import PoisonRates, TriggerSpec

__all__ = [
    "AttackerSpec",
    "DatasetSpec",
    "GameConfig",
    "GameResult",
    "LabeledImage",
    "PoisonRates",
    "SubDataset",
    "TriggerSpec",
    "run_game",
]
