"""Differentiable articulated rigid-body simulation on cuboid bones."""

from .model import (
    SimConfig,
    SimModel,
    SimState,
    build_model,
    kinetic_energy,
    max_penetration,
    project_initial,
)
from .rollout import (
    export_diagnostics,
    rollout,
    rollout_adjoint,
    tracking_loss,
    tracking_loss_grad,
    trajectory_to_motion,
)
from .step import accumulate_forces, step, step_vjp

__all__ = [
    "SimConfig",
    "SimModel",
    "SimState",
    "accumulate_forces",
    "build_model",
    "export_diagnostics",
    "kinetic_energy",
    "max_penetration",
    "project_initial",
    "rollout",
    "rollout_adjoint",
    "step",
    "step_vjp",
    "tracking_loss",
    "tracking_loss_grad",
    "trajectory_to_motion",
]
