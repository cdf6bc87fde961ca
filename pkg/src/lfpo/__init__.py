"""Likelihood-free policy optimization for small masked diffusion models."""

from .config import ModelConfig, TrainConfig, TrainerConfig, load_config
from .denoiser import DenoiserConfig
from .diffusion import DecodeConfig, Trajectory, decode
from .envs import RewardMode, TaskKind, TaskSpec, evaluate, reward
from .errors import CheckpointError, ConfigError, InvalidInputError, TrainingDivergedError
from .objective import LfpoConfig, Mode
from .scheduler import AccumMode
from .trainer import train

__version__ = "0.1.0"

__all__ = [
    "AccumMode", "CheckpointError", "ConfigError", "DecodeConfig", "DenoiserConfig",
    "InvalidInputError", "LfpoConfig", "Mode", "ModelConfig", "RewardMode", "TaskKind",
    "TaskSpec", "TrainConfig", "TrainerConfig", "TrainingDivergedError", "Trajectory",
    "decode", "evaluate", "load_config", "reward", "train",
]
