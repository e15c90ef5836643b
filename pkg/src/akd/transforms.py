"""Rigid transform and rotation utilities with hand-written adjoints.

Rotations are stored as 3x3 matrices, translations as 3-vectors. Every
differentiable primitive here comes with a matching ``*_vjp`` that returns
the vector-Jacobian product; the reverse-mode passes in the rest of the
package are built by composing these.

Cotangent convention: for ``y = f(x)`` the VJP maps ``y_bar`` (same shape
as ``y``) to ``x_bar`` with ``x_bar[i] = sum_j y_bar[j] * dy[j]/dx[i]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Below this angle (radians) the Rodrigues/log coefficients switch to
# their Taylor series to avoid 0/0.
_SMALL_ANGLE = 1e-4


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix. Accepts (..., 3), returns (..., 3, 3)."""
    v = np.asarray(v)
    out = np.zeros(v.shape + (3,), dtype=v.dtype)
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def antisym_dot(m: np.ndarray) -> np.ndarray:
    """Adjoint of ``skew``: returns g with g . v == <m, skew(v)>."""
    return np.stack(
        [
            m[..., 2, 1] - m[..., 1, 2],
            m[..., 0, 2] - m[..., 2, 0],
            m[..., 1, 0] - m[..., 0, 1],
        ],
        axis=-1,
    )


def _rodrigues_coeffs(theta: np.ndarray):
    """a = sin(t)/t and b = (1-cos(t))/t^2 with series fallbacks."""
    t2 = theta * theta
    small = theta < _SMALL_ANGLE
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(theta) / np.where(small, 1.0, theta))
        b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, t2))
    return a, b


def rodrigues(rvec: np.ndarray) -> np.ndarray:
    """Rotation matrix exp([r]x) for rotation vectors of shape (..., 3)."""
    rvec = np.asarray(rvec, dtype=np.float64)
    theta = np.linalg.norm(rvec, axis=-1)
    a, b = _rodrigues_coeffs(theta)
    s = skew(rvec)
    s2 = s @ s
    eye = np.broadcast_to(np.eye(3), s.shape)
    return eye + a[..., None, None] * s + b[..., None, None] * s2


def rodrigues_vjp(rvec: np.ndarray, r_bar: np.ndarray) -> np.ndarray:
    """VJP of ``rodrigues``: maps matrix cotangent to rotation-vector cotangent."""
    rvec = np.asarray(rvec, dtype=np.float64)
    m = np.asarray(r_bar, dtype=np.float64)
    theta = np.linalg.norm(rvec, axis=-1)
    t2 = theta * theta
    small = theta < _SMALL_ANGLE
    a, b = _rodrigues_coeffs(theta)
    # da/dr = (a'(t)/t) r, db/dr = (b'(t)/t) r; the /t is folded into the
    # series so both stay finite at t = 0.
    with np.errstate(invalid="ignore", divide="ignore"):
        safe_t2 = np.where(small, 1.0, t2)
        ap_over_t = np.where(
            small,
            -1.0 / 3.0 + t2 / 30.0,
            (theta * np.cos(theta) - np.sin(theta)) / (safe_t2 * np.where(small, 1.0, theta)),
        )
        bp_over_t = np.where(
            small,
            -1.0 / 12.0 + t2 / 180.0,
            (theta * np.sin(theta) - 2.0 * (1.0 - np.cos(theta))) / (safe_t2 * safe_t2),
        )
    s = skew(rvec)
    s2 = s @ s
    trace_ms = np.einsum("...ij,...ij->...", m, s)
    trace_ms2 = np.einsum("...ij,...ij->...", m, s2)
    # <m, dS> = antisym_dot(m) . dr ; <m, dS S + S dS> = antisym_dot(m S^T + S^T m) . dr
    g1 = antisym_dot(m)
    st = np.swapaxes(s, -1, -2)
    g2 = antisym_dot(m @ st + st @ m)
    return (
        (ap_over_t * trace_ms + bp_over_t * trace_ms2)[..., None] * rvec
        + a[..., None] * g1
        + b[..., None] * g2
    )


def so3_log(rot: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix; inverse of ``rodrigues``.

    Robust near 0; uses the diagonal formula near pi where the standard
    sine form degenerates.
    """
    rot = np.asarray(rot, dtype=np.float64)
    tr = np.clip((np.trace(rot, axis1=-2, axis2=-1) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(tr)
    # components of vee(R - R^T): 2*sin(theta) times the axis
    w = np.stack(
        [
            rot[..., 2, 1] - rot[..., 1, 2],
            rot[..., 0, 2] - rot[..., 2, 0],
            rot[..., 1, 0] - rot[..., 0, 1],
        ],
        axis=-1,
    )
    small = theta < _SMALL_ANGLE
    near_pi = theta > np.pi - 1e-3
    t2 = theta * theta
    with np.errstate(invalid="ignore", divide="ignore"):
        g = np.where(
            small,
            0.5 + t2 / 12.0 + 7.0 * t2 * t2 / 720.0,
            theta / np.where(small | near_pi, 1.0, 2.0 * np.sin(theta)),
        )
    out = g[..., None] * w
    if np.any(near_pi):
        # axis from the symmetric part: R + I = 2 (k k^T (1-cos) + ...) at pi
        flat_rot = rot.reshape(-1, 3, 3)
        flat_theta = np.atleast_1d(theta).reshape(-1)
        flat_out = out.reshape(-1, 3)
        for (fi,) in zip(*np.nonzero(np.atleast_1d(near_pi).reshape(-1))):
            r = flat_rot[fi]
            th = flat_theta[fi]
            q = np.diag(r)
            k = np.sqrt(np.maximum((q + 1.0) / 2.0, 0.0))
            # sign fix from the off-diagonals
            i = int(np.argmax(k))
            j, l = (i + 1) % 3, (i + 2) % 3
            if k[i] > 0:
                k[j] = (r[i, j] + r[j, i]) / (4.0 * k[i])
                k[l] = (r[i, l] + r[l, i]) / (4.0 * k[i])
            sin_part = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
            if np.dot(sin_part, k) < 0:
                k = -k
            flat_out[fi] = th * k / max(np.linalg.norm(k), 1e-12)
        out = flat_out.reshape(out.shape)
    return out


def so3_log_vjp(rot: np.ndarray, rvec_bar: np.ndarray) -> np.ndarray:
    """VJP of ``so3_log``. Valid away from the pi singularity."""
    rot = np.asarray(rot, dtype=np.float64)
    rb = np.asarray(rvec_bar, dtype=np.float64)
    tr = np.clip((np.trace(rot, axis1=-2, axis2=-1) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(tr)
    w = np.stack(
        [
            rot[..., 2, 1] - rot[..., 1, 2],
            rot[..., 0, 2] - rot[..., 2, 0],
            rot[..., 1, 0] - rot[..., 0, 1],
        ],
        axis=-1,
    )
    small = theta < _SMALL_ANGLE
    t2 = theta * theta
    with np.errstate(invalid="ignore", divide="ignore"):
        sin_t = np.sin(theta)
        g = np.where(small, 0.5 + t2 / 12.0 + 7.0 * t2 * t2 / 720.0, theta / np.where(small, 1.0, 2.0 * sin_t))
        # g'(t); series: t/6 + 7 t^3 / 180
        gp = np.where(
            small,
            theta / 6.0 + 7.0 * theta * t2 / 180.0,
            (sin_t - theta * np.cos(theta)) / np.where(small, 1.0, 2.0 * sin_t * sin_t),
        )
    # r = g(theta) w; theta = arccos((tr-1)/2)
    w_bar = g[..., None] * rb
    theta_bar = gp * np.einsum("...i,...i->...", rb, w)
    with np.errstate(invalid="ignore", divide="ignore"):
        denom = np.sqrt(np.maximum(1.0 - tr * tr, 1e-300))
    tr_bar = -theta_bar / denom
    rot_bar = np.zeros_like(rot)
    rot_bar[..., 2, 1] += w_bar[..., 0]
    rot_bar[..., 1, 2] -= w_bar[..., 0]
    rot_bar[..., 0, 2] += w_bar[..., 1]
    rot_bar[..., 2, 0] -= w_bar[..., 1]
    rot_bar[..., 1, 0] += w_bar[..., 2]
    rot_bar[..., 0, 1] -= w_bar[..., 2]
    eye = np.broadcast_to(np.eye(3), rot.shape)
    rot_bar += (0.5 * tr_bar)[..., None, None] * eye
    return rot_bar


def orthonormalize(rot: np.ndarray) -> np.ndarray:
    """One Newton step of the polar projection: R (3I - R^T R) / 2.

    Near-orthonormal input stays orthonormal to machine precision; the map
    is smooth, so it can sit inside differentiated code.
    """
    rot = np.asarray(rot)
    rtr = np.swapaxes(rot, -1, -2) @ rot
    eye = np.broadcast_to(np.eye(3), rot.shape)
    return rot @ (1.5 * eye - 0.5 * rtr)


def orthonormalize_vjp(rot: np.ndarray, out_bar: np.ndarray) -> np.ndarray:
    rot = np.asarray(rot, dtype=np.float64)
    m = np.asarray(out_bar, dtype=np.float64)
    rtr = np.swapaxes(rot, -1, -2) @ rot
    eye = np.broadcast_to(np.eye(3), rot.shape)
    mt = np.swapaxes(m, -1, -2)
    return m @ (1.5 * eye - 0.5 * rtr) - 0.5 * rot @ mt @ rot - 0.5 * rot @ np.swapaxes(rot, -1, -2) @ m


@dataclass(frozen=True)
class RigidTransform:
    """Rotation matrix + translation; maps points x -> R x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points)
        return points @ self.rotation.T + self.translation

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def rotation_orthonormal(self, tol: float = 1e-9) -> bool:
        return float(np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()) < tol


def compose(ra, ta, rb, tb):
    """Compose rigid transforms: (ra,ta) o (rb,tb). Batched over leading dims."""
    return ra @ rb, np.einsum("...ij,...j->...i", ra, tb) + ta


def compose_vjp(ra, ta, rb, tb, rc_bar, tc_bar):
    """VJP of ``compose`` w.r.t. both operands."""
    rbT = np.swapaxes(rb, -1, -2)
    raT = np.swapaxes(ra, -1, -2)
    ra_bar = rc_bar @ rbT + np.einsum("...i,...j->...ij", tc_bar, tb)
    ta_bar = tc_bar
    rb_bar = raT @ rc_bar
    tb_bar = np.einsum("...ji,...j->...i", ra, tc_bar)
    return ra_bar, ta_bar, rb_bar, tb_bar


def axis_angle_matrix(axis: np.ndarray, angle: float | np.ndarray) -> np.ndarray:
    """Rotation about a fixed unit axis; batched over angle."""
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    k = skew(axis)
    eye = np.eye(3)
    sin_a = np.sin(angle)[..., None, None]
    cos_a = np.cos(angle)[..., None, None]
    return eye + sin_a * k + (1.0 - cos_a) * (k @ k)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation from a random rotation vector."""
    v = rng.normal(size=3)
    v = v / max(np.linalg.norm(v), 1e-12) * rng.uniform(0, np.pi * 0.9)
    return rodrigues(v)
