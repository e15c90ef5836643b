"""Gaussian-splat assets: cloud container, LBS deformation, rasterizer."""

from .camera import Camera, GroundConfig, follow_camera
from .cloud import (
    GaussianCloud,
    blend_transforms,
    deform_cloud,
    deform_cloud_vjp,
    relative_transforms,
    relative_transforms_vjp,
)
from .ply import load_ply, save_ply
from .render import SH_C0, render, render_adjoint

__all__ = [
    "Camera",
    "GroundConfig",
    "follow_camera",
    "GaussianCloud",
    "blend_transforms",
    "deform_cloud",
    "deform_cloud_vjp",
    "relative_transforms",
    "relative_transforms_vjp",
    "load_ply",
    "save_ply",
    "render",
    "render_adjoint",
    "SH_C0",
]
