"""Score-distillation driver: optimizes a motion clip against a guidance
provider through the checkpointed render chain, with temporal-smoothness
and ground regularizers."""

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from ..guidance.chain import RenderChain
from ..guidance.losses import (
    ground_grad,
    ground_loss,
    smoothness_grad,
    smoothness_loss,
)
from ..guidance.providers import ProviderError
from ..skeleton import MotionClip, Skeleton, fk_adjoint, fk_arrays, forward_kinematics
from ..splat import follow_camera
from ..transforms import RigidTransform, rodrigues, rodrigues_vjp, so3_log
from .adam import Adam

log = logging.getLogger("akd.optimize")


@dataclass(frozen=True)
class DistillConfig:
    """Distillation schedule and weights.

    t_end decays linearly from t_end_max to t_end_min over the first
    t_end_decay_iters iterations, then stays flat.
    """

    iterations: int = 10000
    t_start: float = 0.02
    t_end_max: float = 0.98
    t_end_min: float = 0.5
    t_end_decay_iters: int = 5000
    cfg_scale: float = 100.0
    lambda_smooth: float = 2e5
    lambda_ground: float = 1e7
    step_rotation: float = 1e-2     # rad, root exp-map increments
    step_translation: float = 1e-2  # m
    step_angles: float = 1e-2       # rad
    velocity: float = 0.0           # forward speed in m/s for the initial clip
    frames: int = 13
    resolution: int = 64
    fps: float = 8.0
    seed: int = 0
    prompt: str = ""
    max_retries: int = 3
    chunk_size: int = 8
    follow_window: int = 1
    checkpoint_every: int = 100

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not (0.0 < self.t_start <= self.t_end_min <= self.t_end_max < 1.0):
            raise ValueError("need 0 < t_start <= t_end_min <= t_end_max < 1")
        if self.frames < 2:
            raise ValueError("frames must be >= 2")
        if self.fps <= 0 or self.resolution < 1:
            raise ValueError("fps and resolution must be positive")
        if self.lambda_smooth < 0 or self.lambda_ground < 0:
            raise ValueError("regularizer weights must be non-negative")
        if self.t_end_decay_iters < 1:
            raise ValueError("t_end_decay_iters must be >= 1")
        if self.max_retries < 0 or self.checkpoint_every < 1:
            raise ValueError("max_retries >= 0 and checkpoint_every >= 1 required")

    def t_end(self, iteration):
        frac = min(iteration / self.t_end_decay_iters, 1.0)
        return self.t_end_max - (self.t_end_max - self.t_end_min) * frac


@dataclass
class DistillResult:
    motion: MotionClip
    metrics: list = field(default_factory=list)


def init_motion(skeleton: Skeleton, frames: int, velocity: float, fps: float) -> MotionClip:
    """Constant forward drift along +x at `velocity` m/s, rest pose otherwise."""
    if frames < 2:
        raise ValueError("a motion clip needs at least 2 frames")
    if fps <= 0:
        raise ValueError("fps must be positive")
    root_t = np.zeros((frames, 3))
    root_t[:, 0] = velocity * np.arange(frames) / fps
    return MotionClip(
        fps=fps,
        root_rotations=np.broadcast_to(np.eye(3), (frames, 3, 3)).copy(),
        root_translations=root_t,
        joint_angles=np.zeros((frames, max(skeleton.bone_count - 1, 0), 3)),
    )


def _guidance_with_retries(provider, video, t, seed, prompt, cfg_scale, retries):
    last = None
    for attempt in range(retries + 1):
        try:
            return provider.gradient(video, t, seed=seed, prompt=prompt, cfg_scale=cfg_scale)
        except ProviderError as exc:
            last = exc
            log.warning("guidance attempt %d/%d failed: %s", attempt + 1, retries + 1, exc)
    raise last


def _clip_bounds(centers, weights, world_r, world_t, rest_r, rest_t):
    """Per-frame AABBs of the skinned kernel centers, (F,2,3)."""
    frames = world_r.shape[0]
    out = np.empty((frames, 2, 3))
    for f in range(frames):
        rel_r = np.einsum("bij,bkj->bik", world_r[f], rest_r)
        rel_t = world_t[f] - np.einsum("bij,bj->bi", rel_r, rest_t)
        per_bone = np.einsum("bij,pj->pbi", rel_r, centers) + rel_t[None, :, :]
        moved = np.einsum("pb,pbi->pi", weights, per_bone)
        out[f, 0] = moved.min(axis=0)
        out[f, 1] = moved.max(axis=0)
    return out


def _clamp_limits(skeleton, angles):
    for b, bone in enumerate(skeleton.bones[1:], start=1):
        if bone.joint is not None and bone.joint.limits is not None:
            lim = bone.joint.limits
            np.clip(angles[:, b - 1], lim[:, 0], lim[:, 1], out=angles[:, b - 1])


def _save_checkpoint(path, iteration, rho, tau, ang, adam, rng):
    state = json.dumps(rng.bit_generator.state)
    payload = {
        "iteration": np.int64(iteration),
        "rho": rho, "tau": tau, "ang": ang,
        "rng_state": np.frombuffer(state.encode(), dtype=np.uint8),
    }
    payload.update(adam.state_arrays())
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    os.replace(tmp, path)


def _load_checkpoint(path, adam, rng):
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    adam.load_state_arrays(arrays)
    rng.bit_generator.state = json.loads(bytes(arrays["rng_state"]).decode())
    return (
        int(arrays["iteration"]),
        arrays["rho"].astype(np.float64),
        arrays["tau"].astype(np.float64),
        arrays["ang"].astype(np.float64),
    )


def distill(skeleton, cloud, kernel_weights, provider, config: DistillConfig, *,
            base_camera, ground=None, initial=None, metrics_path=None,
            checkpoint_path=None, resume=False) -> DistillResult:
    """Optimize root pose and joint angles by score distillation.

    initial: optional MotionClip to start from (its frame count and fps
    take precedence over the config); defaults to the constant-velocity
    rest clip. Returns the final clip and one metrics record per iteration
    {iter, l_smooth, l_ground, grad_norm, t, clip_events}; non-finite
    gradients skip the update and log grad_norm as null.
    """
    b_count = skeleton.bone_count
    if initial is None:
        initial = init_motion(skeleton, config.frames, config.velocity, config.fps)
    else:
        initial.validate(skeleton)
    frames = initial.frame_count
    fps = initial.fps

    rho = so3_log(np.asarray(initial.root_rotations, dtype=np.float64))
    tau = np.asarray(initial.root_translations, dtype=np.float64).copy()
    ang = np.asarray(initial.joint_angles, dtype=np.float64).copy()
    adam = Adam({
        "rho": config.step_rotation,
        "tau": config.step_translation,
        "ang": config.step_angles,
    })
    rng = np.random.default_rng(config.seed)
    start_iter = 0
    if resume:
        if checkpoint_path is None or not os.path.exists(checkpoint_path):
            raise FileNotFoundError("resume requested but no checkpoint found")
        start_iter, rho, tau, ang = _load_checkpoint(checkpoint_path, adam, rng)

    chain = RenderChain(
        skeleton, cloud, kernel_weights, ground=ground, chunk_size=config.chunk_size
    )
    rest = forward_kinematics(skeleton, RigidTransform.identity(), np.zeros((b_count - 1, 3)))
    rest_r = np.stack([x.rotation for x in rest])
    rest_t = np.stack([x.translation for x in rest])
    centers = np.asarray(cloud.centers, dtype=np.float64)
    weights = np.asarray(kernel_weights, dtype=np.float64)

    records = []
    metrics_fh = None
    if metrics_path is not None:
        metrics_fh = open(metrics_path, "a" if (resume and start_iter) else "w")
    try:
        for it in range(start_iter, config.iterations):
            root_r = rodrigues(rho)
            world_r = np.empty((frames, b_count, 3, 3))
            world_t = np.empty((frames, b_count, 3))
            for f in range(frames):
                world_r[f], world_t[f] = fk_arrays(skeleton, root_r[f], tau[f], ang[f])
            cams = follow_camera(
                _clip_bounds(centers, weights, world_r, world_t, rest_r, rest_t),
                base_camera, config.follow_window,
            )

            video = chain.forward(root_r, tau, ang, cams)
            t = float(rng.uniform(config.t_start, config.t_end(it)))
            noise_seed = int(rng.integers(0, 2**31 - 1))
            video_bar = _guidance_with_retries(
                provider, video, t, noise_seed, config.prompt, config.cfg_scale,
                config.max_retries,
            )
            pose_bar = chain.backward(np.asarray(video_bar, dtype=np.float64))

            rot_mat_bar = pose_bar["root_rotations"].copy()
            g_tau = pose_bar["root_translations"].copy()
            g_ang = pose_bar["angles"].copy()

            l_ground = ground_loss(world_r, world_t, skeleton)
            if config.lambda_ground > 0:
                gr_r, gr_t = ground_grad(world_r, world_t, skeleton)
                for f in range(frames):
                    rb, tb, ab = fk_adjoint(
                        skeleton, RigidTransform(root_r[f], tau[f]), ang[f],
                        config.lambda_ground * gr_r[f], config.lambda_ground * gr_t[f],
                    )
                    rot_mat_bar[f] += rb
                    g_tau[f] += tb
                    g_ang[f] += ab

            g_rho = rodrigues_vjp(rho, rot_mat_bar)

            theta_flat = np.concatenate([rho, tau, ang.reshape(frames, -1)], axis=1)
            if frames >= 3:
                l_smooth = smoothness_loss(theta_flat)
                gs = config.lambda_smooth * smoothness_grad(theta_flat)
                g_rho += gs[:, 0:3]
                g_tau += gs[:, 3:6]
                g_ang += gs[:, 6:].reshape(ang.shape)
            else:
                l_smooth = 0.0

            sq = float(np.sum(g_rho**2) + np.sum(g_tau**2) + np.sum(g_ang**2))
            finite = np.isfinite(sq)
            grad_norm = float(np.sqrt(sq)) if finite else None
            if finite:
                adam.update(
                    {"rho": rho, "tau": tau, "ang": ang},
                    {"rho": g_rho, "tau": g_tau, "ang": g_ang},
                )
                _clamp_limits(skeleton, ang)
            else:
                log.warning("iteration %d: non-finite gradient, update skipped", it)

            record = {
                "iter": it,
                "l_smooth": float(l_smooth),
                "l_ground": float(l_ground),
                "grad_norm": grad_norm,
                "t": t,
                "clip_events": 0,
            }
            records.append(record)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(record) + "\n")
                metrics_fh.flush()
            if checkpoint_path is not None and (it + 1) % config.checkpoint_every == 0:
                _save_checkpoint(checkpoint_path, it + 1, rho, tau, ang, adam, rng)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    if checkpoint_path is not None:
        _save_checkpoint(checkpoint_path, config.iterations, rho, tau, ang, adam, rng)
    motion = MotionClip(
        fps=fps,
        root_rotations=rodrigues(rho),
        root_translations=tau.copy(),
        joint_angles=ang.copy(),
    )
    return DistillResult(motion=motion, metrics=records)
