"""Reversible graph-network particle simulator with shared forward and inverse dynamics."""

from .errors import (
    ConfigurationError,
    ContractError,
    DegenerateMatrixError,
    FormatError,
    InsufficientDataError,
    NumericError,
    RgnsError,
    RolloutDivergedError,
)
from .particles import StepState, ToyGenConfig, Trajectory, generate_trajectory
from .simulator import ModelConfig, ModelParams, goal_condition, identity_model, init_model, inverse_rollout, rollout
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "ConfigurationError",
    "ContractError",
    "DegenerateMatrixError",
    "FormatError",
    "InsufficientDataError",
    "ModelConfig",
    "ModelParams",
    "NumericError",
    "RgnsError",
    "RolloutDivergedError",
    "StepState",
    "ToyGenConfig",
    "TrainConfig",
    "Trajectory",
    "generate_trajectory",
    "goal_condition",
    "identity_model",
    "init_model",
    "inverse_rollout",
    "load_checkpoint",
    "rollout",
    "save_checkpoint",
    "train",
]
