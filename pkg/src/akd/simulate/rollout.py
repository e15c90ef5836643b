"""Rollouts, the chunk-clipped adjoint sweep, and the tracking objective.

A rollout advances (F-1)*N substeps and records the state at every N-th
one (F states, the initial included). PD targets are given per frame and
linearly interpolated to substeps. The adjoint re-steps each chunk forward
from its checkpoint, then walks it backward; after every chunk the
in-flight adjoint is norm-clipped, which bounds gradient explosions from
stiff contacts at the price of a bias that vanishes when the threshold is
disabled.
"""

import csv

import numpy as np

from ..skeleton import MotionClip, Skeleton
from ..transforms import rodrigues, so3_log
from .model import SimConfig, SimModel, SimState, kinetic_energy, max_penetration
from .step import step, step_vjp


def _upright_local(initial: SimState, config: SimConfig):
    if config.upright_gain > 0:
        return initial.rotations[0].T @ np.array([0.0, 1.0, 0.0])
    return None


def _target_slice(targets, k, n):
    """Per-substep PD target: linear interpolation between frame targets."""
    if targets is None:
        return None
    i, r = divmod(k, n)
    phi = r / n
    return (1.0 - phi) * targets[i] + phi * targets[i + 1]


def _check_finite(state: SimState, k):
    for name in ("rotations", "positions", "velocities", "omegas"):
        if not np.isfinite(getattr(state, name)).all():
            raise RuntimeError(f"non-finite {name} at substep {k}")


def rollout(initial: SimState, model: SimModel, config: SimConfig,
            targets=None, frames=None):
    """Simulate (frames-1)*N substeps; returns a list of `frames` states.

    targets: optional (frames, J, 3) per-frame PD targets.
    """
    if targets is not None:
        targets = np.asarray(targets, dtype=np.float64)
        if frames is None:
            frames = targets.shape[0]
        if targets.shape != (frames, model.joint_count, 3):
            raise ValueError(
                f"targets must be ({frames},{model.joint_count},3), got {targets.shape}"
            )
    if frames is None or frames < 1:
        raise ValueError("need a frame count >= 1")
    initial.validate()
    n = config.substeps_per_frame
    upright = _upright_local(initial, config)
    state = initial.copy()
    recorded = [state.copy()]
    total = (frames - 1) * n
    for k in range(total):
        state = step(state, model, config, _target_slice(targets, k, n), upright)
        _check_finite(state, k)
        if (k + 1) % n == 0:
            recorded.append(state.copy())
    return recorded


def rollout_adjoint(initial: SimState, model: SimModel, config: SimConfig,
                    cotangents, targets=None, frames=None):
    """Reverse sweep over a rollout in checkpointed chunks.

    cotangents: dict of per-frame arrays keyed by any of "rotations"
    (F,B,3,3), "positions", "velocities", "omegas" (F,B,3); missing keys
    mean zero. Returns a dict with gradients for the initial state
    ("rotations", "positions", "velocities", "omegas"), per-frame PD
    targets ("targets", zeros when no targets were given), and the number
    of clip events ("clip_events").
    """
    if targets is not None:
        targets = np.asarray(targets, dtype=np.float64)
        if frames is None:
            frames = targets.shape[0]
    if frames is None or frames < 1:
        raise ValueError("need a frame count >= 1")
    n = config.substeps_per_frame
    total = (frames - 1) * n
    chunk = config.chunk_size
    b_count = model.bone_count
    upright = _upright_local(initial, config)

    def frame_cot(i):
        rot = np.zeros((b_count, 3, 3))
        pos = np.zeros((b_count, 3))
        vel = np.zeros((b_count, 3))
        omg = np.zeros((b_count, 3))
        for key, arr in (("rotations", rot), ("positions", pos),
                         ("velocities", vel), ("omegas", omg)):
            if key in cotangents and cotangents[key] is not None:
                arr += np.asarray(cotangents[key][i], dtype=np.float64)
        return rot, pos, vel, omg

    # forward with checkpoints at chunk starts
    checkpoints = {0: initial.copy()}
    state = initial.copy()
    for k in range(total):
        state = step(state, model, config, _target_slice(targets, k, n), upright)
        _check_finite(state, k)
        if (k + 1) % chunk == 0 and (k + 1) < total:
            checkpoints[k + 1] = state.copy()

    sbar = list(frame_cot(frames - 1))
    targets_bar = (
        np.zeros((frames, model.joint_count, 3)) if model.joint_count else
        np.zeros((frames, 0, 3))
    )
    clip_events = 0

    for start in reversed(range(0, total, chunk)):
        end = min(start + chunk, total)
        states = [checkpoints[start]]
        for k in range(start, end - 1):
            states.append(
                step(states[-1], model, config, _target_slice(targets, k, n), upright)
            )
        for k in reversed(range(start, end)):
            tgt_k = _target_slice(targets, k, n)
            (rb, pb, vb, ob), tb = step_vjp(
                states[k - start], model, config, tuple(sbar), tgt_k, upright
            )
            sbar = [rb, pb, vb, ob]
            if tb is not None:
                i, r = divmod(k, n)
                phi = r / n
                targets_bar[i] += (1.0 - phi) * tb
                targets_bar[i + 1] += phi * tb
            if k % n == 0 and k > 0:
                for dst, add in zip(sbar, frame_cot(k // n)):
                    dst += add
        if config.clipping_enabled:
            norm = np.sqrt(sum(float(np.sum(a * a)) for a in sbar))
            if norm > config.clip_threshold:
                factor = config.clip_threshold / norm
                sbar = [a * factor for a in sbar]
                clip_events += 1

    if total > 0:  # with zero substeps the seed above already was frame 0
        for dst, add in zip(sbar, frame_cot(0)):
            dst += add
    return {
        "rotations": sbar[0],
        "positions": sbar[1],
        "velocities": sbar[2],
        "omegas": sbar[3],
        "targets": targets_bar,
        "clip_events": clip_events,
    }


def tracking_loss(states, target_r, target_t, targets=None, lambda_smooth=0.2):
    """L1 pose-tracking loss plus a temporal regularizer on PD targets.

    states: F simulated SimStates; target_r (F,B,3,3), target_t (F,B,3)
    reference bone transforms. The L1 sums |rotation entry| + |translation
    entry| differences over frames 1..F-1 and divides by F-1; frame 0 is
    pinned by the initial projection. The regularizer is lambda_smooth
    times the MAE of consecutive target differences.
    """
    frames = len(states)
    if frames < 2:
        raise ValueError("need at least 2 frames")
    target_r = np.asarray(target_r, dtype=np.float64)
    target_t = np.asarray(target_t, dtype=np.float64)
    total = 0.0
    for i in range(1, frames):
        total += np.abs(states[i].rotations - target_r[i]).sum()
        total += np.abs(states[i].positions - target_t[i]).sum()
    loss = total / (frames - 1)
    if targets is not None and lambda_smooth > 0:
        targets = np.asarray(targets, dtype=np.float64)
        diff = targets[1:] - targets[:-1]
        if diff.size:
            loss += lambda_smooth * float(np.mean(np.abs(diff)))
    return float(loss)


def tracking_loss_grad(states, target_r, target_t, targets=None, lambda_smooth=0.2):
    """Subgradients of tracking_loss.

    Returns (cotangents dict for rollout_adjoint, targets_bar or None).
    """
    frames = len(states)
    if frames < 2:
        raise ValueError("need at least 2 frames")
    target_r = np.asarray(target_r, dtype=np.float64)
    target_t = np.asarray(target_t, dtype=np.float64)
    b_count = states[0].bone_count
    rot_bar = np.zeros((frames, b_count, 3, 3))
    pos_bar = np.zeros((frames, b_count, 3))
    for i in range(1, frames):
        rot_bar[i] = np.sign(states[i].rotations - target_r[i]) / (frames - 1)
        pos_bar[i] = np.sign(states[i].positions - target_t[i]) / (frames - 1)
    targets_bar = None
    if targets is not None and lambda_smooth > 0:
        targets = np.asarray(targets, dtype=np.float64)
        diff = targets[1:] - targets[:-1]
        targets_bar = np.zeros_like(targets)
        if diff.size:
            g = lambda_smooth * np.sign(diff) / diff.size
            targets_bar[:-1] -= g
            targets_bar[1:] += g
    return {"rotations": rot_bar, "positions": pos_bar}, targets_bar


def _joint_angles_from(rj, axes, axes_inv, iters=20):
    """Invert the compound three-axis rotation: find theta with
    R(a3,t3) R(a2,t2) R(a1,t1) = rj. Newton on the log-map error; the
    Jacobian columns are the axes carried into the error frame,
    [r3 r2 a1, r3 a2, a3]."""
    theta = np.zeros(3)
    for _ in range(iters):
        r1 = rodrigues(axes[0] * theta[0])
        r2 = rodrigues(axes[1] * theta[1])
        r3 = rodrigues(axes[2] * theta[2])
        err = so3_log(rj @ (r3 @ r2 @ r1).T)
        if np.abs(err).max() < 1e-12:
            break
        jac = np.column_stack([r3 @ (r2 @ axes[0]), r3 @ axes[1], axes[2]])
        try:
            delta = np.linalg.solve(jac, err)
        except np.linalg.LinAlgError:  # gimbal-degenerate: fall back
            delta = axes_inv @ err
        theta = theta + delta
    return theta


def trajectory_to_motion(states, skeleton: Skeleton, model: SimModel,
                         config: SimConfig) -> MotionClip:
    """Convert recorded states back to a motion clip (root + joint angles)."""
    frames = len(states)
    rest0 = skeleton.bones[0].rest_transform
    inv_r0 = rest0.rotation.T
    root_rotations = np.empty((frames, 3, 3))
    root_translations = np.empty((frames, 3))
    angles = np.zeros((frames, skeleton.bone_count - 1, 3))
    for i, st in enumerate(states):
        root_rotations[i] = st.rotations[0] @ inv_r0
        root_translations[i] = st.positions[0] - root_rotations[i] @ rest0.translation
        for j in range(model.joint_count):
            p = model.joint_parent[j]
            c = model.joint_child[j]
            rj = st.rotations[p].T @ st.rotations[c] @ model.rest_rot[j].T
            angles[i, j] = _joint_angles_from(rj, model.axes[j], model.axes_inv[j])
    fps = 1.0 / (config.dt * config.substeps_per_frame)
    return MotionClip(
        fps=fps,
        root_rotations=root_rotations,
        root_translations=root_translations,
        joint_angles=angles,
    )


def export_diagnostics(path, states, model: SimModel, config: SimConfig,
                       clip_counts=None):
    """Per-frame CSV: time, kinetic energy, max penetration, clip events."""
    frame_dt = config.dt * config.substeps_per_frame
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "kinetic_energy", "max_penetration", "clip_events"])
        for i, st in enumerate(states):
            count = 0 if clip_counts is None else int(clip_counts[i])
            writer.writerow(
                [
                    f"{i * frame_dt:.9f}",
                    f"{kinetic_energy(st, model):.9e}",
                    f"{max_penetration(st, model):.9e}",
                    count,
                ]
            )
