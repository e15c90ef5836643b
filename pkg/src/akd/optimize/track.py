"""Physics-based motion tracking: fit per-frame PD targets and the initial
velocity so a simulated rollout reproduces a kinematic clip."""

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from ..simulate import (
    SimConfig,
    SimState,
    build_model,
    max_penetration,
    project_initial,
    rollout,
    rollout_adjoint,
    tracking_loss,
    tracking_loss_grad,
)
from ..skeleton import MotionClip, Skeleton, fk_arrays
from .adam import Adam

log = logging.getLogger("akd.optimize")


@dataclass(frozen=True)
class TrackConfig:
    iterations: int = 200
    lambda_smooth: float = 0.2      # PD-target sequence regularizer weight
    step_targets: float = 1e-2      # rad
    step_velocity: float = 1e-2     # m/s and rad/s on the initial state
    sim: SimConfig = field(default_factory=SimConfig)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lambda_smooth < 0:
            raise ValueError("lambda_smooth must be non-negative")
        if self.step_targets <= 0 or self.step_velocity <= 0:
            raise ValueError("step sizes must be positive")


@dataclass
class TrackResult:
    targets: np.ndarray        # (F,J,3) optimized PD targets
    initial_state: SimState    # projected start with optimized velocities
    states: list               # final rollout, F SimStates
    metrics: list = field(default_factory=list)


def reference_transforms(clip: MotionClip, skeleton: Skeleton):
    """Per-frame world bone transforms of a kinematic clip."""
    frames = clip.frame_count
    b = skeleton.bone_count
    ref_r = np.empty((frames, b, 3, 3))
    ref_t = np.empty((frames, b, 3))
    for f in range(frames):
        ref_r[f], ref_t[f] = fk_arrays(
            skeleton, clip.root_rotations[f], clip.root_translations[f],
            clip.joint_angles[f],
        )
    return ref_r, ref_t


def track(clip: MotionClip, skeleton: Skeleton, config: TrackConfig, *,
          metrics_path=None) -> TrackResult:
    """Recover PD targets and initial velocity that track `clip`.

    The initial pose is the clip's first frame projected onto the ground;
    only its velocities are optimized. Metrics records carry the target
    regularizer as l_smooth and the rollout's max penetration as l_ground.
    """
    clip.validate(skeleton)
    if clip.frame_count < 2:
        raise ValueError("tracking needs at least 2 frames")
    model = build_model(skeleton)
    frames = clip.frame_count
    ref_r, ref_t = reference_transforms(clip, skeleton)
    base = project_initial(ref_r[0], ref_t[0], skeleton)

    targets = np.asarray(clip.joint_angles, dtype=np.float64).copy()
    vel0 = np.zeros((skeleton.bone_count, 3))
    omg0 = np.zeros((skeleton.bone_count, 3))
    adam = Adam({
        "targets": config.step_targets,
        "vel": config.step_velocity,
        "omg": config.step_velocity,
    })

    def start_state():
        return SimState(
            base.rotations.copy(), base.positions.copy(), vel0.copy(), omg0.copy()
        )

    records = []
    metrics_fh = open(metrics_path, "w") if metrics_path is not None else None
    try:
        for it in range(config.iterations):
            state0 = start_state()
            states = rollout(state0, model, config.sim, targets=targets, frames=frames)
            cots, reg_grad = tracking_loss_grad(
                states, ref_r, ref_t, targets=targets,
                lambda_smooth=config.lambda_smooth,
            )
            adj = rollout_adjoint(
                state0, model, config.sim, cots, targets=targets, frames=frames
            )
            g_targets = adj["targets"]
            if reg_grad is not None:
                g_targets = g_targets + reg_grad
            g_vel = adj["velocities"]
            g_omg = adj["omegas"]

            sq = float(np.sum(g_targets**2) + np.sum(g_vel**2) + np.sum(g_omg**2))
            finite = np.isfinite(sq)
            grad_norm = float(np.sqrt(sq)) if finite else None
            if finite:
                adam.update(
                    {"targets": targets, "vel": vel0, "omg": omg0},
                    {"targets": g_targets, "vel": g_vel, "omg": g_omg},
                )
            else:
                log.warning("iteration %d: non-finite gradient, update skipped", it)

            diff = targets[1:] - targets[:-1]
            l_smooth = (
                config.lambda_smooth * float(np.mean(np.abs(diff))) if diff.size else 0.0
            )
            record = {
                "iter": it,
                "l_smooth": l_smooth,
                "l_ground": max(max_penetration(s, model) for s in states),
                "grad_norm": grad_norm,
                "t": 0.0,
                "clip_events": int(adj["clip_events"]),
            }
            records.append(record)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(record) + "\n")
                metrics_fh.flush()
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    final_state = start_state()
    final_states = rollout(final_state, model, config.sim, targets=targets, frames=frames)
    return TrackResult(
        targets=targets, initial_state=final_state, states=final_states,
        metrics=records,
    )


def zero_control_baseline(clip: MotionClip, skeleton: Skeleton, config: TrackConfig):
    """Tracking L1 of a passive (no PD drive) rollout from the projected
    start at rest; the reference point for tracking improvement."""
    model = build_model(skeleton)
    ref_r, ref_t = reference_transforms(clip, skeleton)
    base = project_initial(ref_r[0], ref_t[0], skeleton)
    states = rollout(base, model, config.sim, targets=None, frames=clip.frame_count)
    return tracking_loss(states, ref_r, ref_t)
