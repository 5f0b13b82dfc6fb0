"""Degradation-aware restoration backends."""

from .networks import CondUNet, step_embedding
from .restorer import (
    BACKENDS,
    Restorer,
    RestorerConfig,
    conditioning_vector,
    restore,
    sde_forward_marginal,
    sde_reverse_sample,
    task_loss,
)
from .sde import DEFAULT_STATIONARY_STD, MeanRevertingSDE, default_schedules

__all__ = [
    "BACKENDS",
    "CondUNet",
    "DEFAULT_STATIONARY_STD",
    "MeanRevertingSDE",
    "Restorer",
    "RestorerConfig",
    "conditioning_vector",
    "default_schedules",
    "restore",
    "sde_forward_marginal",
    "sde_reverse_sample",
    "step_embedding",
    "task_loss",
]
