"""Gaussian cloud container and linear-blend deformation of kernels.

Deformation follows the blended-transform form: each kernel center maps
through x~ = sum_b w_b (R_b x + T_b) with (R_b, T_b) the relative bone
transforms from rest to the deformed pose, and the covariance transforms
through the blend matrix A = sum_b w_b R_b as A Sigma A^T.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..transforms import RigidTransform


@dataclass
class GaussianCloud:
    """Kernel soup: opacities in [0,1], SPD covariances, SH color coeffs.

    sh_dc holds the degree-0 coefficients (P,3); sh_rest carries any
    higher-degree coefficients opaquely (P,K) and is preserved untouched
    through deformation and file round-trips.
    """

    opacities: np.ndarray
    centers: np.ndarray
    covariances: np.ndarray
    sh_dc: np.ndarray
    sh_rest: np.ndarray = None

    def __post_init__(self):
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(-1)
        p = self.opacities.shape[0]
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(p, 3)
        self.covariances = np.asarray(self.covariances, dtype=np.float64).reshape(p, 3, 3)
        self.sh_dc = np.asarray(self.sh_dc, dtype=np.float64).reshape(p, 3)
        if self.sh_rest is None:
            self.sh_rest = np.zeros((p, 0))
        else:
            self.sh_rest = np.asarray(self.sh_rest, dtype=np.float64).reshape(p, -1)
        if np.any(self.opacities < 0) or np.any(self.opacities > 1):
            raise ValueError("opacities must lie in [0,1]")
        asym = np.abs(self.covariances - np.swapaxes(self.covariances, -1, -2)).max() if p else 0.0
        if asym > 1e-9:
            raise ValueError(f"covariances not symmetric (max dev {asym:.2e})")
        if p:
            eig = np.linalg.eigvalsh(self.covariances)
            if eig.min() <= 1e-12:
                raise ValueError(f"covariance eigenvalue {eig.min():.2e} not positive")

    @property
    def kernel_count(self) -> int:
        return self.opacities.shape[0]


def relative_transforms(deformed, rest):
    """Rest-to-deformed bone transforms M_b = W_def_b o W_rest_b^-1.

    Both arguments are sequences of RigidTransform; returns (R (B,3,3),
    T (B,3)).
    """
    b_count = len(deformed)
    rel_r = np.empty((b_count, 3, 3))
    rel_t = np.empty((b_count, 3))
    for b in range(b_count):
        m = deformed[b].compose(rest[b].inverse())
        rel_r[b] = m.rotation
        rel_t[b] = m.translation
    return rel_r, rel_t


def relative_transforms_vjp(deformed, rest, rel_r_bar, rel_t_bar):
    """Push relative-transform cotangents back to the deformed world
    transforms (rest pose held fixed). Returns (R_bar (B,3,3), t_bar (B,3))."""
    b_count = len(deformed)
    r_bar = np.zeros((b_count, 3, 3))
    t_bar = np.zeros((b_count, 3))
    for b in range(b_count):
        inv = rest[b].inverse()
        # M_R = R_d R_inv, M_T = R_d t_inv + t_d
        r_bar[b] = rel_r_bar[b] @ inv.rotation.T + np.outer(rel_t_bar[b], inv.translation)
        t_bar[b] = rel_t_bar[b]
    return r_bar, t_bar


def blend_transforms(rel_r, rel_t, weights):
    """Per-kernel blend matrix A = sum_b w_b R_b and offset sum_b w_b T_b."""
    a = np.einsum("pb,bij->pij", weights, rel_r)
    t = weights @ rel_t
    return a, t


def deform_cloud(cloud: GaussianCloud, deformed, rest, kernel_weights: np.ndarray) -> GaussianCloud:
    """LBS warp of kernel centers and covariances; opacities and SH kept.

    deformed/rest: per-bone world transforms (deformed pose and the rest
    pose the weights were computed in). kernel_weights: (P,B) rows
    summing to 1.
    """
    w = np.asarray(kernel_weights, dtype=np.float64)
    if w.shape[0] != cloud.kernel_count:
        raise ValueError("weight rows do not match kernel count")
    dev = np.abs(w.sum(axis=1) - 1.0).max() if w.size else 0.0
    if dev > 1e-6:
        raise ValueError(f"weight rows must sum to 1 (max deviation {dev:.2e})")
    rel_r, rel_t = relative_transforms(deformed, rest)
    a, t = blend_transforms(rel_r, rel_t, w)
    centers = np.einsum("pij,pj->pi", a, cloud.centers) + t
    cov = a @ cloud.covariances @ np.swapaxes(a, -1, -2)
    # the blend matrix is not exactly orthonormal, so scrub tiny asymmetry
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    return GaussianCloud(
        opacities=cloud.opacities.copy(),
        centers=centers,
        covariances=cov,
        sh_dc=cloud.sh_dc.copy(),
        sh_rest=cloud.sh_rest.copy(),
    )


def deform_cloud_vjp(cloud: GaussianCloud, rel_r, rel_t, kernel_weights, centers_bar, cov_bar):
    """VJP of the deformation w.r.t. the relative bone transforms.

    centers_bar: (P,3); cov_bar: (P,3,3) cotangents of the deformed cloud.
    Returns (rel_r_bar (B,3,3), rel_t_bar (B,3)).
    """
    w = np.asarray(kernel_weights, dtype=np.float64)
    a, _ = blend_transforms(rel_r, rel_t, w)
    centers_bar = np.asarray(centers_bar, dtype=np.float64)
    cov_bar = np.asarray(cov_bar, dtype=np.float64)
    # A_bar_p = xbar x^T + (Sbar A S^T + Sbar^T A S)
    sig = cloud.covariances
    a_bar = np.einsum("pi,pj->pij", centers_bar, cloud.centers)
    a_bar += cov_bar @ a @ np.swapaxes(sig, -1, -2) + np.swapaxes(cov_bar, -1, -2) @ a @ sig
    rel_r_bar = np.einsum("pb,pij->bij", w, a_bar)
    rel_t_bar = np.einsum("pb,pi->bi", w, centers_bar)
    return rel_r_bar, rel_t_bar
