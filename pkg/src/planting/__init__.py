"""Incremental channel planting for small CNNs, guided by a distillation teacher."""
from .distill import DistillLoss, combined_loss, kl_term
from .gradcore import GradTape, NonFiniteError, Tensor
from .model import (
    ArchitectureSpec,
    ChannelConfig,
    PlantableNetwork,
    build_network,
    count_params,
    forward,
    param_count,
    plant_channels,
)
from .search import SearchConfig, group_partition, run_planting, select_candidates, selection_loss
from .trainer import TrainConfig, evaluate, lr_at_epoch, sgd_step, train

__all__ = [
    "ArchitectureSpec",
    "ChannelConfig",
    "DistillLoss",
    "GradTape",
    "NonFiniteError",
    "PlantableNetwork",
    "SearchConfig",
    "Tensor",
    "TrainConfig",
    "build_network",
    "combined_loss",
    "count_params",
    "evaluate",
    "forward",
    "group_partition",
    "kl_term",
    "lr_at_epoch",
    "param_count",
    "plant_channels",
    "run_planting",
    "select_candidates",
    "selection_loss",
    "sgd_step",
    "train",
]

__version__ = "0.1.0"
