from .cem import CemPlanner, PetsController, cem_plan
from .loop import HoldActor, History, TrainConfig, TrainResult, Variant, evaluate, train
from .sac import SacAgent, entropy, q_target, sac_update

__all__ = [
    "CemPlanner", "PetsController", "cem_plan", "HoldActor", "History", "TrainConfig",
    "TrainResult", "Variant", "evaluate", "train", "SacAgent", "entropy", "q_target", "sac_update",
]
