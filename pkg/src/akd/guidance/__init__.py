"""Distillation guidance: schedules, predictors, losses, and the wire."""

from .chain import ActivationMeter, RenderChain
from .losses import (
    LossWeights,
    bone_corners,
    corner_heights,
    ground_grad,
    ground_loss,
    ground_penalty,
    smoothness_grad,
    smoothness_loss,
)
from .noise import draw_noise
from .predictors import (
    AttractorPredictor,
    OraclePredictor,
    VelocityPredictor,
    ZeroPredictor,
)
from .providers import GradientProvider, LocalProvider, ProviderError, RemoteProvider
from .schedule import CosineSchedule
from .sds import sds_from_velocity, sds_gradient
from .wire import MAGIC, WireError, read_message, write_message

__all__ = [
    "ActivationMeter",
    "AttractorPredictor",
    "CosineSchedule",
    "GradientProvider",
    "LocalProvider",
    "LossWeights",
    "MAGIC",
    "OraclePredictor",
    "ProviderError",
    "RemoteProvider",
    "RenderChain",
    "VelocityPredictor",
    "WireError",
    "ZeroPredictor",
    "bone_corners",
    "corner_heights",
    "draw_noise",
    "ground_grad",
    "ground_loss",
    "ground_penalty",
    "read_message",
    "sds_from_velocity",
    "sds_gradient",
    "smoothness_grad",
    "smoothness_loss",
    "write_message",
]
