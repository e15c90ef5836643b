"""Optimization drivers: score distillation over motion clips and
physics-based tracking over PD targets."""

from .adam import Adam
from .distill import DistillConfig, DistillResult, distill, init_motion
from .track import (
    TrackConfig,
    TrackResult,
    reference_transforms,
    track,
    zero_control_baseline,
)

__all__ = [
    "Adam",
    "DistillConfig",
    "DistillResult",
    "TrackConfig",
    "TrackResult",
    "distill",
    "init_motion",
    "reference_transforms",
    "track",
    "zero_control_baseline",
]
