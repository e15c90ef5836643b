"""Motion regularizers: temporal smoothness and ground clearance."""

from dataclasses import dataclass

import numpy as np

from ..skeleton import bone_corner_offsets


@dataclass(frozen=True)
class LossWeights:
    """Regularizer weights for the distillation objective."""

    lambda_smooth: float = 2e5
    lambda_ground: float = 1e7

    def __post_init__(self):
        if self.lambda_smooth < 0 or self.lambda_ground < 0:
            raise ValueError("loss weights must be non-negative")


def smoothness_loss(theta):
    """MAE of the second temporal difference over interior frames.

    theta: (F, ...) parameter track with F >= 3. Returns the mean of
    |theta[i-1] - 2*theta[i] + theta[i+1]| over i = 1..F-2 and all entries.
    Zero for tracks constant or linear in time.
    """
    th = np.asarray(theta, dtype=np.float64)
    if th.ndim < 1 or th.shape[0] < 3:
        raise ValueError("temporal Laplacian needs at least 3 frames")
    lap = th[:-2] - 2.0 * th[1:-1] + th[2:]
    return float(np.mean(np.abs(lap)))


def smoothness_grad(theta):
    """Subgradient of smoothness_loss (zero at exact kinks)."""
    th = np.asarray(theta, dtype=np.float64)
    if th.ndim < 1 or th.shape[0] < 3:
        raise ValueError("temporal Laplacian needs at least 3 frames")
    lap = th[:-2] - 2.0 * th[1:-1] + th[2:]
    g = np.sign(lap) / lap.size
    out = np.zeros_like(th)
    out[:-2] += g
    out[1:-1] -= 2.0 * g
    out[2:] += g
    return out


def bone_corners(skeleton):
    """Local cuboid corner offsets, (B,8,3)."""
    return bone_corner_offsets(skeleton)


def corner_heights(world_r, world_t, skeleton):
    """World-space y of every bone corner; (F,B,8).

    world_r: (F,B,3,3) world bone rotations, world_t: (F,B,3) translations.
    Only the middle rotation row enters the height.
    """
    world_r = np.asarray(world_r, dtype=np.float64)
    world_t = np.asarray(world_t, dtype=np.float64)
    local = bone_corners(skeleton)
    return np.einsum("fbj,bcj->fbc", world_r[:, :, 1, :], local) + world_t[:, :, None, 1]


def ground_penalty(heights):
    """Mean hinge penalty max(-y, 0) over a set of corner heights."""
    y = np.asarray(heights, dtype=np.float64)
    return float(np.mean(np.maximum(-y, 0.0)))


def ground_loss(world_r, world_t, skeleton):
    """Mean penetration depth over every cuboid corner of every frame."""
    return ground_penalty(corner_heights(world_r, world_t, skeleton))


def ground_grad(world_r, world_t, skeleton):
    """Subgradient of ground_loss w.r.t. the bone transforms.

    Returns (r_bar (F,B,3,3), t_bar (F,B,3)). Corners exactly on the plane
    contribute nothing (the hinge's zero side).
    """
    world_r = np.asarray(world_r, dtype=np.float64)
    world_t = np.asarray(world_t, dtype=np.float64)
    local = bone_corners(skeleton)
    y = corner_heights(world_r, world_t, skeleton)
    coeff = np.where(y < 0.0, -1.0 / y.size, 0.0)
    r_bar = np.zeros_like(world_r)
    r_bar[:, :, 1, :] = np.einsum("fbc,bcj->fbj", coeff, local)
    t_bar = np.zeros_like(world_t)
    t_bar[:, :, 1] = coeff.sum(axis=2)
    return r_bar, t_bar
