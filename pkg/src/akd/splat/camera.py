"""Pinhole camera, ground/background configuration, and follow-camera."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..transforms import RigidTransform


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. Extrinsics map world to camera space (z forward).

    Pixel (row i, col j) samples the ray through (j + 0.5, i + 0.5) in
    pixel coordinates; u = fx * X/Z + cx, v = fy * Y/Z + cy.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsics: RigidTransform

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not self.extrinsics.rotation_orthonormal(1e-9):
            raise ValueError("camera rotation not orthonormal")

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "rotation": [float(x) for x in self.extrinsics.rotation.ravel()],
            "translation": [float(x) for x in self.extrinsics.translation],
        }

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        return Camera(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
            extrinsics=RigidTransform(
                np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
                np.asarray(d["translation"], dtype=np.float64),
            ),
        )


@dataclass(frozen=True)
class GroundConfig:
    """Checkerboard ground plane at y = height plus scene background.

    shadow_max in [0,1) scales the shadow directly under the asset;
    shadow_decay (1/m) controls how fast it fades with clearance.
    """

    height: float = 0.0
    tile_size: float = 0.5
    color_a: tuple = (0.8, 0.8, 0.8)
    color_b: tuple = (0.4, 0.4, 0.4)
    background: tuple = (1.0, 1.0, 1.0)
    shadow_max: float = 0.0
    shadow_decay: float = 1.0

    def __post_init__(self):
        if self.tile_size <= 0:
            raise ValueError("tile size must be positive")
        if not (0.0 <= self.shadow_max < 1.0):
            raise ValueError("shadow_max must lie in [0,1)")
        if self.shadow_decay < 0:
            raise ValueError("shadow_decay must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "tile_size": self.tile_size,
            "color_a": list(self.color_a),
            "color_b": list(self.color_b),
            "background": list(self.background),
            "shadow_max": self.shadow_max,
            "shadow_decay": self.shadow_decay,
        }

    @staticmethod
    def from_dict(d: dict) -> "GroundConfig":
        return GroundConfig(
            height=float(d.get("height", 0.0)),
            tile_size=float(d.get("tile_size", 0.5)),
            color_a=tuple(d.get("color_a", (0.8, 0.8, 0.8))),
            color_b=tuple(d.get("color_b", (0.4, 0.4, 0.4))),
            background=tuple(d.get("background", (1.0, 1.0, 1.0))),
            shadow_max=float(d.get("shadow_max", 0.0)),
            shadow_decay=float(d.get("shadow_decay", 1.0)),
        )


def follow_camera(clip_bounds: np.ndarray, base_camera: Camera, window: int = 1) -> list:
    """Per-frame cameras that keep the asset's box center fixed in view.

    clip_bounds: (F,2,3) per-frame world AABBs of the deformed cloud
    (min corner, max corner). The box centers are smoothed with a centered
    moving average of `window` frames (window 1 = exact follow), then the
    extrinsic translation is adjusted so the smoothed center projects to
    the same camera-space point as in frame 0.
    """
    clip_bounds = np.asarray(clip_bounds, dtype=np.float64)
    if window < 1:
        raise ValueError("window must be >= 1")
    centers = clip_bounds.mean(axis=1)  # (F,3)
    f_count = centers.shape[0]
    smoothed = np.empty_like(centers)
    half = window // 2
    for i in range(f_count):
        lo = max(0, i - half)
        hi = min(f_count, i + half + 1)
        smoothed[i] = centers[lo:hi].mean(axis=0)
    rot = base_camera.extrinsics.rotation
    anchor = rot @ smoothed[0] + base_camera.extrinsics.translation
    out = []
    for i in range(f_count):
        t = anchor - rot @ smoothed[i]
        out.append(replace(base_camera, extrinsics=RigidTransform(rot, t)))
    return out
