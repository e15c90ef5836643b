"""State, configuration, and skeleton-derived constants for the simulator.

The state is maximal-coordinate: every bone carries its own world rigid
transform and spatial velocity. Joints act through stiff anchor
spring-dampers rather than reduced coordinates, which keeps each substep a
plain function of the previous state and makes the reverse sweep
mechanical.
"""

from dataclasses import dataclass, field

import numpy as np

from ..skeleton import Skeleton, bone_corner_offsets


@dataclass
class SimState:
    """Per-bone world rotations (B,3,3), positions, velocities, omegas (B,3).

    Velocities are linear m/s; omegas are world-frame angular rad/s.
    """

    rotations: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    omegas: np.ndarray

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.velocities = np.asarray(self.velocities, dtype=np.float64)
        self.omegas = np.asarray(self.omegas, dtype=np.float64)
        b = self.rotations.shape[0]
        if self.rotations.shape != (b, 3, 3):
            raise ValueError("rotations must be (B,3,3)")
        for name in ("positions", "velocities", "omegas"):
            if getattr(self, name).shape != (b, 3):
                raise ValueError(f"{name} must be (B,3)")

    @property
    def bone_count(self):
        return self.rotations.shape[0]

    def copy(self):
        return SimState(
            self.rotations.copy(),
            self.positions.copy(),
            self.velocities.copy(),
            self.omegas.copy(),
        )

    def validate(self):
        arrays = (self.rotations, self.positions, self.velocities, self.omegas)
        if not all(np.isfinite(a).all() for a in arrays):
            raise ValueError("state contains non-finite values")
        rtr = np.swapaxes(self.rotations, -1, -2) @ self.rotations
        dev = np.abs(rtr - np.eye(3)).max()
        if dev > 1e-6:
            raise ValueError(f"rotations drifted off the manifold (dev {dev:.2e})")

    @staticmethod
    def rest(skeleton_rotations, skeleton_translations):
        b = len(skeleton_rotations)
        return SimState(
            np.asarray(skeleton_rotations, dtype=np.float64),
            np.asarray(skeleton_translations, dtype=np.float64),
            np.zeros((b, 3)),
            np.zeros((b, 3)),
        )


@dataclass(frozen=True)
class SimConfig:
    """Integrator and force parameters. Stiffnesses are per unit of the
    respective error; clip_threshold = None or inf disables adjoint
    clipping."""

    dt: float = 1.0 / 2400.0
    substeps_per_frame: int = 300
    gravity: float = 9.81
    joint_stiffness: float = 2e5
    joint_damping: float = 1e3
    contact_stiffness: float = 2e4
    contact_damping: float = 1e2
    friction_damping: float = 1e2
    friction_mu: float = 0.8
    pd_stiffness: float = 50.0
    pd_damping: float = 2.0
    upright_gain: float = 0.0
    ground: bool = True
    chunk_size: int = 32
    clip_threshold: float = 1.0
    # optional (J,3) per-joint-axis multiplier on both PD gains; rows of
    # zeros free an axis entirely (used e.g. to model a plain hinge)
    axis_gain_scale: np.ndarray = None

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.substeps_per_frame < 1:
            raise ValueError("substeps_per_frame must be >= 1")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        for name in (
            "joint_stiffness", "joint_damping", "contact_stiffness",
            "contact_damping", "friction_damping", "friction_mu",
            "pd_stiffness", "pd_damping", "upright_gain",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.clip_threshold is not None and not self.clip_threshold > 0:
            raise ValueError("clip_threshold must be positive (or None to disable)")
        if self.axis_gain_scale is not None:
            object.__setattr__(
                self, "axis_gain_scale",
                np.asarray(self.axis_gain_scale, dtype=np.float64),
            )

    @property
    def clipping_enabled(self):
        return self.clip_threshold is not None and np.isfinite(self.clip_threshold)


@dataclass(frozen=True)
class SimModel:
    """Precomputed per-bone and per-joint constants (joint j drives bone j+1)."""

    masses: np.ndarray          # (B,)
    inertia: np.ndarray         # (B,3) body-frame diagonal
    corners: np.ndarray         # (B,8,3) local cuboid corners
    joint_parent: np.ndarray    # (J,) parent bone index
    joint_child: np.ndarray     # (J,) child bone index, = j+1
    anchor_parent: np.ndarray   # (J,3) anchor in the parent bone frame
    anchor_child: np.ndarray    # (J,3) the same point in the child bone frame
    rest_rot: np.ndarray        # (J,3,3) child rest rotation relative to parent
    axes: np.ndarray            # (J,3,3) joint axes as rows
    axes_inv: np.ndarray        # (J,3,3) inverse of the axis column matrix

    @property
    def bone_count(self):
        return self.masses.shape[0]

    @property
    def joint_count(self):
        return self.joint_parent.shape[0]


def build_model(skeleton: Skeleton) -> SimModel:
    b_count = skeleton.bone_count
    masses = np.empty(b_count)
    inertia = np.empty((b_count, 3))
    for i, bone in enumerate(skeleton.bones):
        hx, hy, hz = bone.half_extents
        m = 8.0 * hx * hy * hz * bone.density
        masses[i] = m
        inertia[i] = m / 3.0 * np.array([hy * hy + hz * hz, hx * hx + hz * hz, hx * hx + hy * hy])
    j_count = b_count - 1
    joint_parent = np.empty(j_count, dtype=np.intp)
    joint_child = np.empty(j_count, dtype=np.intp)
    anchor_parent = np.empty((j_count, 3))
    anchor_child = np.empty((j_count, 3))
    rest_rot = np.empty((j_count, 3, 3))
    axes = np.empty((j_count, 3, 3))
    axes_inv = np.empty((j_count, 3, 3))
    for i in range(1, b_count):
        bone = skeleton.bones[i]
        j = i - 1
        joint_parent[j] = bone.parent
        joint_child[j] = i
        anchor_parent[j] = bone.joint.anchor
        rest = bone.rest_transform
        anchor_child[j] = rest.rotation.T @ (bone.joint.anchor - rest.translation)
        rest_rot[j] = rest.rotation
        axes[j] = bone.joint.axes
        axes_inv[j] = np.linalg.inv(bone.joint.axes.T)
    return SimModel(
        masses=masses,
        inertia=inertia,
        corners=bone_corner_offsets(skeleton),
        joint_parent=joint_parent,
        joint_child=joint_child,
        anchor_parent=anchor_parent,
        anchor_child=anchor_child,
        rest_rot=rest_rot,
        axes=axes,
        axes_inv=axes_inv,
    )


def project_initial(rotations, translations, skeleton: Skeleton,
                    velocities=None, omegas=None) -> SimState:
    """Initial state with a uniform vertical shift putting the lowest
    cuboid corner exactly on the ground plane (airborne poses are lowered)."""
    rot = np.asarray(rotations, dtype=np.float64)
    pos = np.asarray(translations, dtype=np.float64).copy()
    local = bone_corner_offsets(skeleton)
    heights = np.einsum("bj,bcj->bc", rot[:, 1, :], local) + pos[:, None, 1]
    pos[:, 1] -= heights.min()
    b = skeleton.bone_count
    vel = np.zeros((b, 3)) if velocities is None else np.asarray(velocities, dtype=np.float64)
    omg = np.zeros((b, 3)) if omegas is None else np.asarray(omegas, dtype=np.float64)
    return SimState(rot.copy(), pos, vel, omg)


def kinetic_energy(state: SimState, model: SimModel) -> float:
    """Total translational plus rotational kinetic energy."""
    lin = 0.5 * float(np.sum(model.masses * np.sum(state.velocities**2, axis=1)))
    w_body = np.einsum("bji,bj->bi", state.rotations, state.omegas)
    rot = 0.5 * float(np.sum(model.inertia * w_body**2))
    return lin + rot


def max_penetration(state: SimState, model: SimModel) -> float:
    """Deepest corner penetration below the ground plane (0 if clear)."""
    heights = (
        np.einsum("bj,bcj->bc", state.rotations[:, 1, :], model.corners)
        + state.positions[:, None, 1]
    )
    return float(max(0.0, -heights.min()))
