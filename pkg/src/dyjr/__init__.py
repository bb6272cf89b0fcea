"""GRPO and Dynamic Jensen-Shannon Replay on tabular softmax policies."""

from .config import BufferConfig, TrainConfig
from .divergence import RegularizerConfig
from .grpo_loss import ClipConfig, GroupRollout
from .policy import PolicyParams, Trajectory
from .replay_buffer import FillSchedule, ReplayBuffer, RLEPStore
from .task_env import Query, TaskSpec
from .trainer import StepRecord, evaluate, train

__all__ = [
    "BufferConfig",
    "ClipConfig",
    "FillSchedule",
    "GroupRollout",
    "PolicyParams",
    "Query",
    "RLEPStore",
    "RegularizerConfig",
    "ReplayBuffer",
    "StepRecord",
    "TaskSpec",
    "TrainConfig",
    "Trajectory",
    "evaluate",
    "train",
]

__version__ = "0.1.0"
