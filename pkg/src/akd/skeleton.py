"""Articulation trees, motion clips, and differentiable forward kinematics.

A skeleton is a list of bones in topological order (parent index strictly
less than child index, single root at index 0). Each non-root bone hangs
off its parent through a 3-DoF compound spherical joint: three successive
rotations about fixed, linearly independent axes, applied about an anchor
point expressed in the parent frame.

Convention (fixed here, used identically by the simulator): the joint
rotation is R(a3, t3) @ R(a2, t2) @ R(a1, t1), axis 1 innermost.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .transforms import RigidTransform, antisym_dot, axis_angle_matrix, compose, skew


@dataclass(frozen=True)
class Joint:
    """Compound spherical joint: three fixed rotation axes about an anchor.

    axes: (3,3), row i is axis i+1 (unit norm). anchor: (3,) in the parent
    bone's frame. limits: optional (3,2) of [min,max] radians per axis.
    """

    axes: np.ndarray
    anchor: np.ndarray
    limits: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "axes", np.asarray(self.axes, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "anchor", np.asarray(self.anchor, dtype=np.float64).reshape(3))
        if self.limits is not None:
            object.__setattr__(self, "limits", np.asarray(self.limits, dtype=np.float64).reshape(3, 2))
        norms = np.linalg.norm(self.axes, axis=1)
        if np.abs(norms - 1.0).max() > 1e-9:
            raise ValueError(f"joint axes must be unit norm, got norms {norms}")
        if abs(np.linalg.det(self.axes.T)) <= 1e-6:
            raise ValueError("joint axes are linearly dependent")


@dataclass(frozen=True)
class Bone:
    """One link of the tree: a cuboid attached to the parent frame.

    rest_transform maps this bone's rest frame into the parent frame (world
    frame for the root). half_extents are the cuboid's half sizes along its
    local axes; density feeds the simulator's mass model.
    """

    parent: Optional[int]
    rest_transform: RigidTransform
    half_extents: np.ndarray
    density: float = 1000.0
    joint: Optional[Joint] = None

    def __post_init__(self):
        object.__setattr__(self, "half_extents", np.asarray(self.half_extents, dtype=np.float64).reshape(3))
        if np.any(self.half_extents <= 0):
            raise ValueError(f"half_extents must be positive, got {self.half_extents}")
        if not self.rest_transform.rotation_orthonormal(1e-9):
            raise ValueError("rest rotation not orthonormal")


@dataclass(frozen=True)
class Skeleton:
    bones: tuple
    root_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "bones", tuple(self.bones))
        roots = [i for i, b in enumerate(self.bones) if b.parent is None]
        if len(roots) != 1:
            raise ValueError(f"need exactly one root bone, found {len(roots)}")
        if roots[0] != self.root_index:
            raise ValueError(f"root_index {self.root_index} does not match parentless bone {roots[0]}")
        if self.root_index != 0:
            raise ValueError("bones must be stored in topological order with the root first")
        for i, b in enumerate(self.bones):
            if b.parent is not None:
                if not (0 <= b.parent < i):
                    raise ValueError(f"bone {i}: parent index {b.parent} must precede it")
                if b.joint is None:
                    raise ValueError(f"non-root bone {i} has no joint")

    @property
    def bone_count(self) -> int:
        return len(self.bones)

    def angle_row(self, bone_index: int) -> int:
        """Row of a non-root bone in the (B-1, 3) angle array."""
        if bone_index == self.root_index:
            raise ValueError("root bone carries no joint angles")
        return bone_index - 1


@dataclass
class MotionClip:
    """Posed trajectory: per-frame root transform plus joint angles.

    root_rotations: (F,3,3); root_translations: (F,3); joint_angles:
    (F, B-1, 3) radians.
    """

    fps: float
    root_rotations: np.ndarray
    root_translations: np.ndarray
    joint_angles: np.ndarray

    def __post_init__(self):
        self.root_rotations = np.asarray(self.root_rotations, dtype=np.float64)
        self.root_translations = np.asarray(self.root_translations, dtype=np.float64)
        self.joint_angles = np.asarray(self.joint_angles, dtype=np.float64)
        f = self.frame_count
        if self.root_rotations.shape != (f, 3, 3) or self.root_translations.shape != (f, 3):
            raise ValueError("root transform arrays have inconsistent shapes")
        if self.joint_angles.ndim != 3 or self.joint_angles.shape[0] != f or self.joint_angles.shape[2] != 3:
            raise ValueError(f"joint_angles must be (F, B-1, 3), got {self.joint_angles.shape}")

    @property
    def frame_count(self) -> int:
        return self.root_rotations.shape[0]

    def root_transform(self, i: int) -> RigidTransform:
        return RigidTransform(self.root_rotations[i], self.root_translations[i])

    def validate(self, skeleton: Skeleton):
        """Full invariant check against a skeleton; raises on violation."""
        if self.frame_count < 2:
            raise ValueError("motion clips need at least 2 frames")
        if self.joint_angles.shape[1] != skeleton.bone_count - 1:
            raise ValueError("angle rows do not match skeleton bone count")
        if not np.all(np.isfinite(self.joint_angles)):
            raise ValueError("non-finite joint angle")
        for b, bone in enumerate(skeleton.bones):
            if bone.joint is None or bone.joint.limits is None:
                continue
            row = skeleton.angle_row(b)
            th = self.joint_angles[:, row, :]
            lo, hi = bone.joint.limits[:, 0], bone.joint.limits[:, 1]
            if np.any(th < lo - 1e-12) or np.any(th > hi + 1e-12):
                raise ValueError(f"joint angles out of limits on bone {b}")


# ---------------------------------------------------------------------------
# forward kinematics

def _joint_rotation(joint: Joint, theta: np.ndarray):
    """Compound rotation R3 @ R2 @ R1 plus the per-axis factors (for adjoints)."""
    r1 = axis_angle_matrix(joint.axes[0], theta[0])
    r2 = axis_angle_matrix(joint.axes[1], theta[1])
    r3 = axis_angle_matrix(joint.axes[2], theta[2])
    return r3 @ r2 @ r1, (r1, r2, r3)


def _check_pose(skeleton: Skeleton, root: RigidTransform, angles: np.ndarray) -> np.ndarray:
    angles = np.asarray(angles, dtype=np.float64)
    want = (skeleton.bone_count - 1, 3)
    if angles.shape != want:
        raise ValueError(f"angles shape {angles.shape}, expected {want}")
    if not np.all(np.isfinite(angles)):
        raise ValueError("non-finite joint angle")
    if not root.rotation_orthonormal(1e-6):
        raise ValueError("root rotation not orthonormal")
    for b, bone in enumerate(skeleton.bones):
        j = bone.joint
        if j is None or j.limits is None:
            continue
        th = angles[skeleton.angle_row(b)]
        if np.any(th < j.limits[:, 0] - 1e-12) or np.any(th > j.limits[:, 1] + 1e-12):
            raise ValueError(f"joint limit violated on bone {b}: {th} outside {j.limits.tolist()}")
    return angles


def _local_transform(bone: Bone, theta: np.ndarray):
    """Parent-frame transform of a non-root bone: rotate about the anchor, then rest."""
    rj, factors = _joint_rotation(bone.joint, theta)
    a = bone.joint.anchor
    rest = bone.rest_transform
    loc_r = rj @ rest.rotation
    loc_t = rj @ (rest.translation - a) + a
    return loc_r, loc_t, rj, factors


def forward_kinematics(
    skeleton: Skeleton, root: RigidTransform, angles: np.ndarray
) -> list:
    """World transforms of every bone. angles: (B-1, 3) radians.

    Joint limits, when present, are enforced: a violating pose raises
    rather than being clamped (clamping is the optimizer's job).
    """
    angles = _check_pose(skeleton, root, angles)
    b_count = skeleton.bone_count
    world_r = np.empty((b_count, 3, 3))
    world_t = np.empty((b_count, 3))
    for b, bone in enumerate(skeleton.bones):
        if bone.parent is None:
            world_r[b], world_t[b] = compose(
                root.rotation, root.translation, bone.rest_transform.rotation, bone.rest_transform.translation
            )
        else:
            loc_r, loc_t, _, _ = _local_transform(bone, angles[skeleton.angle_row(b)])
            world_r[b], world_t[b] = compose(world_r[bone.parent], world_t[bone.parent], loc_r, loc_t)
    return [RigidTransform(world_r[b], world_t[b]) for b in range(b_count)]


def fk_arrays(skeleton: Skeleton, root_rotation, root_translation, angles):
    """Array-of-transforms FK used by inner loops: returns ((B,3,3), (B,3)).

    Same math as forward_kinematics but skips limit checks and object
    wrapping; callers are expected to have validated the pose.
    """
    angles = np.asarray(angles, dtype=np.float64)
    b_count = skeleton.bone_count
    world_r = np.empty((b_count, 3, 3))
    world_t = np.empty((b_count, 3))
    for b, bone in enumerate(skeleton.bones):
        if bone.parent is None:
            world_r[b], world_t[b] = compose(
                np.asarray(root_rotation, dtype=np.float64),
                np.asarray(root_translation, dtype=np.float64),
                bone.rest_transform.rotation,
                bone.rest_transform.translation,
            )
        else:
            loc_r, loc_t, _, _ = _local_transform(bone, angles[skeleton.angle_row(b)])
            world_r[b], world_t[b] = compose(world_r[bone.parent], world_t[bone.parent], loc_r, loc_t)
    return world_r, world_t


def fk_adjoint(
    skeleton: Skeleton,
    root: RigidTransform,
    angles: np.ndarray,
    rot_cotangent: np.ndarray,
    tra_cotangent: np.ndarray,
):
    """Vector-Jacobian product of forward_kinematics.

    rot_cotangent: (B,3,3) gradients w.r.t. each world rotation;
    tra_cotangent: (B,3) w.r.t. each world translation. Returns
    (root_rotation_bar (3,3), root_translation_bar (3,), angles_bar (B-1,3)).
    """
    angles = _check_pose(skeleton, root, angles)
    b_count = skeleton.bone_count
    rot_cotangent = np.asarray(rot_cotangent, dtype=np.float64)
    tra_cotangent = np.asarray(tra_cotangent, dtype=np.float64)
    if rot_cotangent.shape != (b_count, 3, 3) or tra_cotangent.shape != (b_count, 3):
        raise ValueError("cotangent shapes do not match skeleton")

    # forward pass with caches
    world_r = np.empty((b_count, 3, 3))
    world_t = np.empty((b_count, 3))
    cache = [None] * b_count
    for b, bone in enumerate(skeleton.bones):
        if bone.parent is None:
            world_r[b], world_t[b] = compose(
                root.rotation, root.translation, bone.rest_transform.rotation, bone.rest_transform.translation
            )
        else:
            loc_r, loc_t, rj, factors = _local_transform(bone, angles[skeleton.angle_row(b)])
            cache[b] = (loc_r, loc_t, rj, factors)
            world_r[b], world_t[b] = compose(world_r[bone.parent], world_t[bone.parent], loc_r, loc_t)

    # reverse sweep, children before parents
    r_bar = rot_cotangent.copy()
    t_bar = tra_cotangent.copy()
    angles_bar = np.zeros((b_count - 1, 3))
    for b in range(b_count - 1, 0, -1):
        bone = skeleton.bones[b]
        p = bone.parent
        loc_r, loc_t, rj, (f1, f2, f3) = cache[b]
        # through the composition world_b = world_p o local_b
        r_bar[p] += r_bar[b] @ loc_r.T + np.outer(t_bar[b], loc_t)
        t_bar[p] += t_bar[b]
        loc_r_bar = world_r[p].T @ r_bar[b]
        loc_t_bar = world_r[p].T @ t_bar[b]
        # through the local transform: loc_r = RJ @ Rr, loc_t = RJ (tr - a) + a
        joint = bone.joint
        rest = bone.rest_transform
        rj_bar = loc_r_bar @ rest.rotation.T + np.outer(loc_t_bar, rest.translation - joint.anchor)
        # through the compound rotation RJ = R3 R2 R1
        row = skeleton.angle_row(b)
        angles_bar[row, 2] = antisym_dot(rj_bar @ rj.T) @ joint.axes[2]
        angles_bar[row, 1] = antisym_dot(f3.T @ rj_bar @ f1.T @ f2.T) @ joint.axes[1]
        angles_bar[row, 0] = antisym_dot(f2.T @ f3.T @ rj_bar @ f1.T) @ joint.axes[0]

    rest0 = skeleton.bones[skeleton.root_index].rest_transform
    root_r_bar = r_bar[0] @ rest0.rotation.T + np.outer(t_bar[0], rest0.translation)
    root_t_bar = t_bar[0].copy()
    return root_r_bar, root_t_bar, angles_bar


_CORNER_SIGNS = np.array(
    [[sx, sy, sz] for sx in (-1.0, 1.0) for sy in (-1.0, 1.0) for sz in (-1.0, 1.0)]
)


def bone_corner_offsets(skeleton: Skeleton) -> np.ndarray:
    """Local cuboid corner offsets of every bone, (B,8,3)."""
    half = np.stack([bone.half_extents for bone in skeleton.bones])
    return _CORNER_SIGNS[None, :, :] * half[:, None, :]


# ---------------------------------------------------------------------------
# JSON serialization

def skeleton_to_dict(skeleton: Skeleton) -> dict:
    bones = []
    for b in skeleton.bones:
        entry = {
            "parent": b.parent,
            "rest_rotation": [float(x) for x in b.rest_transform.rotation.ravel()],
            "rest_translation": [float(x) for x in b.rest_transform.translation],
            "half_extents": [float(x) for x in b.half_extents],
            "density": float(b.density),
            "joint": None,
        }
        if b.joint is not None:
            entry["joint"] = {
                "axes": [[float(x) for x in ax] for ax in b.joint.axes],
                "anchor": [float(x) for x in b.joint.anchor],
                "limits": None if b.joint.limits is None else [[float(x) for x in lm] for lm in b.joint.limits],
            }
        bones.append(entry)
    return {"bones": bones}


def skeleton_from_dict(data: dict) -> Skeleton:
    bones = []
    for entry in data["bones"]:
        joint = None
        jd = entry.get("joint")
        if jd is not None:
            joint = Joint(
                axes=np.asarray(jd["axes"], dtype=np.float64),
                anchor=np.asarray(jd["anchor"], dtype=np.float64),
                limits=None if jd.get("limits") is None else np.asarray(jd["limits"], dtype=np.float64),
            )
        bones.append(
            Bone(
                parent=entry["parent"],
                rest_transform=RigidTransform(
                    np.asarray(entry["rest_rotation"], dtype=np.float64).reshape(3, 3),
                    np.asarray(entry["rest_translation"], dtype=np.float64),
                ),
                half_extents=np.asarray(entry["half_extents"], dtype=np.float64),
                density=float(entry.get("density", 1000.0)),
                joint=joint,
            )
        )
    return Skeleton(bones=tuple(bones))


def save_skeleton(skeleton: Skeleton, path):
    with open(path, "w") as fh:
        json.dump(skeleton_to_dict(skeleton), fh, indent=1)


def load_skeleton(path) -> Skeleton:
    with open(path) as fh:
        return skeleton_from_dict(json.load(fh))


def motion_to_dict(clip: MotionClip) -> dict:
    frames = []
    for i in range(clip.frame_count):
        frames.append(
            {
                "root_rotation": [float(x) for x in clip.root_rotations[i].ravel()],
                "root_translation": [float(x) for x in clip.root_translations[i]],
                "angles": [[float(x) for x in row] for row in clip.joint_angles[i]],
            }
        )
    return {"fps": float(clip.fps), "frames": frames}


def motion_from_dict(data: dict) -> MotionClip:
    frames = data["frames"]
    f_count = len(frames)
    rr = np.empty((f_count, 3, 3))
    rt = np.empty((f_count, 3))
    rows = len(frames[0]["angles"]) if f_count else 0
    ang = np.empty((f_count, rows, 3))
    for i, fr in enumerate(frames):
        rr[i] = np.asarray(fr["root_rotation"], dtype=np.float64).reshape(3, 3)
        rt[i] = np.asarray(fr["root_translation"], dtype=np.float64)
        ang[i] = np.asarray(fr["angles"], dtype=np.float64).reshape(rows, 3)
    return MotionClip(fps=float(data["fps"]), root_rotations=rr, root_translations=rt, joint_angles=ang)


def save_motion(clip: MotionClip, path):
    with open(path, "w") as fh:
        json.dump(motion_to_dict(clip), fh, indent=1)


def load_motion(path) -> MotionClip:
    with open(path) as fh:
        return motion_from_dict(json.load(fh))
