"""Surrogate network, its training loop and checkpoint format."""

from .network import (ArchConfig, ConcatMode, Normalization, SurrogateModel, forward, init_model,
                      param_layout, positional_encoding, predict_normalized)
from .training import (PairSet, RolloutError, TrainConfig, TrainingDiverged, evaluate_losses,
                       gradients, loss, rollout, train)

__all__ = [
    "ArchConfig", "ConcatMode", "Normalization", "SurrogateModel", "forward", "init_model",
    "param_layout", "positional_encoding", "predict_normalized", "PairSet", "RolloutError",
    "TrainConfig", "TrainingDiverged", "evaluate_losses", "gradients", "loss", "rollout", "train"
]
