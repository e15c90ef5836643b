"""Pose-to-pixels chain with a boundary-checkpointed backward pass.

Forward renders every frame but keeps the per-frame activation (the
deformed cloud and its bone transforms) only at chunk boundaries. The
backward pass walks chunks in reverse and rebuilds the missing frames one
at a time, so peak live activations stay at ceil(F/chunk) + 1 instead of
F. Recomputation repeats the identical float ops, so chunked and
monolithic gradients agree bitwise.
"""

import numpy as np

from ..skeleton import fk_adjoint, forward_kinematics
from ..splat import (
    deform_cloud,
    deform_cloud_vjp,
    relative_transforms,
    relative_transforms_vjp,
    render,
    render_adjoint,
)
from ..transforms import RigidTransform


class ActivationMeter:
    """Counts live per-frame activation buffers; peak is the audited bound."""

    def __init__(self):
        self.live = 0
        self.peak = 0

    def acquire(self, n=1):
        self.live += n
        self.peak = max(self.peak, self.live)

    def release(self, n=1):
        self.live -= n
        if self.live < 0:
            raise RuntimeError("activation meter released more than acquired")

    def reset(self):
        self.live = 0
        self.peak = 0


class RenderChain:
    """Renders a motion clip and pulls a video cotangent back to the pose.

    Parameters are per-frame root rotations (F,3,3), root translations
    (F,3), and joint angles (F,B-1,3). Cameras may differ per frame (for a
    follow rig) but are treated as constants by the backward pass.
    """

    def __init__(self, skeleton, cloud, kernel_weights, ground=None, chunk_size=8,
                 dtype=np.float32, meter=None):
        if chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        self.skeleton = skeleton
        self.cloud = cloud
        self.kernel_weights = np.asarray(kernel_weights, dtype=np.float64)
        if self.kernel_weights.shape != (cloud.kernel_count, skeleton.bone_count):
            raise ValueError("kernel weight shape does not match cloud and skeleton")
        self.ground = ground
        self.chunk_size = int(chunk_size)
        self.dtype = dtype
        self.meter = meter if meter is not None else ActivationMeter()
        self.rest = forward_kinematics(
            skeleton, RigidTransform.identity(), np.zeros((skeleton.bone_count - 1, 3))
        )
        self._acts = {}
        self._params = None

    def _release_all(self):
        for _ in range(len(self._acts)):
            self.meter.release()
        self._acts = {}

    def _frame_activation(self, f):
        root_r, root_t, angles, _ = self._params
        posed = forward_kinematics(
            self.skeleton, RigidTransform(root_r[f], root_t[f]), angles[f]
        )
        rel_r, rel_t = relative_transforms(posed, self.rest)
        warped = deform_cloud(self.cloud, posed, self.rest, self.kernel_weights)
        self.meter.acquire()
        return {"posed": posed, "rel_r": rel_r, "rel_t": rel_t, "cloud": warped}

    def forward(self, root_rotations, root_translations, angles, cameras):
        """Render all frames; returns video (F,H,W,3) in [0,1].

        cameras: one Camera per frame (a list), or a single Camera reused
        for every frame.
        """
        root_r = np.asarray(root_rotations, dtype=np.float64)
        root_t = np.asarray(root_translations, dtype=np.float64)
        ang = np.asarray(angles, dtype=np.float64)
        frames = root_r.shape[0]
        joints = self.skeleton.bone_count - 1
        if root_r.shape != (frames, 3, 3) or root_t.shape != (frames, 3):
            raise ValueError("root parameter shapes do not agree")
        if ang.shape != (frames, joints, 3):
            raise ValueError(f"angles must be ({frames},{joints},3), got {ang.shape}")
        if not hasattr(cameras, "__len__"):
            cameras = [cameras] * frames
        if len(cameras) != frames:
            raise ValueError("need one camera per frame")
        self._release_all()
        self._params = (root_r, root_t, ang, list(cameras))
        video = None
        for f in range(frames):
            act = self._frame_activation(f)
            image, _ = render(act["cloud"], cameras[f], self.ground, dtype=self.dtype)
            if video is None:
                video = np.empty((frames,) + image.shape, dtype=self.dtype)
            video[f] = image
            if f % self.chunk_size == 0:
                self._acts[f] = act
            else:
                self.meter.release()
        return video

    def backward(self, video_bar):
        """Pull a video cotangent back to the pose parameters.

        Returns dict with keys root_rotations (F,3,3), root_translations
        (F,3), angles (F,B-1,3).
        """
        if self._params is None:
            raise RuntimeError("backward called before forward")
        root_r, root_t, ang, cameras = self._params
        frames = root_r.shape[0]
        video_bar = np.asarray(video_bar, dtype=np.float64)
        if video_bar.shape[0] != frames:
            raise ValueError("video cotangent frame count mismatch")
        root_r_bar = np.zeros_like(root_r)
        root_t_bar = np.zeros_like(root_t)
        ang_bar = np.zeros_like(ang)
        starts = list(range(0, frames, self.chunk_size))
        for start in reversed(starts):
            stop = min(start + self.chunk_size, frames)
            for f in reversed(range(start, stop)):
                act = self._acts.pop(f, None)
                if act is None:
                    act = self._frame_activation(f)
                grads = render_adjoint(act["cloud"], cameras[f], self.ground, video_bar[f])
                rel_r_bar, rel_t_bar = deform_cloud_vjp(
                    self.cloud, act["rel_r"], act["rel_t"], self.kernel_weights,
                    grads["centers"], grads["covariances"],
                )
                world_r_bar, world_t_bar = relative_transforms_vjp(
                    act["posed"], self.rest, rel_r_bar, rel_t_bar
                )
                rr, tt, aa = fk_adjoint(
                    self.skeleton, RigidTransform(root_r[f], root_t[f]), ang[f],
                    world_r_bar, world_t_bar,
                )
                root_r_bar[f] = rr
                root_t_bar[f] = tt
                ang_bar[f] = aa
                self.meter.release()
        return {
            "root_rotations": root_r_bar,
            "root_translations": root_t_bar,
            "angles": ang_bar,
        }
