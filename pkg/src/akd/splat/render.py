"""Software rasterizer for Gaussian clouds with a hand-written adjoint.

Forward: kernels are projected to 2D Gaussians through the local affine
approximation of the perspective map, globally sorted front-to-back by
view-space center depth (stable index tie-break), and alpha-composited
per pixel over a 3-sigma footprint. The ground layer is a ray-cast
checkerboard with a heuristic vertical-clearance shadow; the final pixel
is foreground + leftover transmittance * background.

Backward: re-runs the forward while keeping per-kernel footprint tapes,
then sweeps back-to-front maintaining the suffix composite E and suffix
transmittance U per pixel, so d(pixel)/d(alpha_i) = T_i (c_i - E_i) and
d(accum alpha)/d(alpha_i) = T_i U_i without ever dividing by (1 - alpha).
Depth order, the below-ground opacity mask, color clamping, and the
shadow field are frozen at forward values.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .camera import Camera, GroundConfig
from .cloud import GaussianCloud

log = logging.getLogger(__name__)

SH_C0 = 0.28209479177387814
FOOTPRINT_SIGMA = 3.0


def _project(cloud: GaussianCloud, camera: Camera):
    """Camera-space centers, pixel means, 2D covariances, validity mask."""
    rot = camera.extrinsics.rotation
    tra = camera.extrinsics.translation
    xc = cloud.centers @ rot.T + tra  # (P,3)
    z = xc[:, 2]
    in_front = z > 1e-6
    zs = np.where(in_front, z, 1.0)
    u = camera.fx * xc[:, 0] / zs + camera.cx
    v = camera.fy * xc[:, 1] / zs + camera.cy
    mean2d = np.stack([u, v], axis=1)
    # J rows: du/dXc, dv/dXc
    jac = np.zeros((cloud.kernel_count, 2, 3))
    jac[:, 0, 0] = camera.fx / zs
    jac[:, 0, 2] = -camera.fx * xc[:, 0] / zs**2
    jac[:, 1, 1] = camera.fy / zs
    jac[:, 1, 2] = -camera.fy * xc[:, 1] / zs**2
    cov_cam = rot @ cloud.covariances @ rot.T
    cov2d = jac @ cov_cam @ np.swapaxes(jac, -1, -2)
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    invertible = np.isfinite(det) & (det > 1e-18)
    n_degenerate = int(np.sum(in_front & ~invertible))
    if n_degenerate:
        log.warning("skipping %d kernels with non-invertible projected covariance", n_degenerate)
    valid = in_front & invertible
    return xc, mean2d, jac, cov_cam, cov2d, det, valid


def _colors(cloud: GaussianCloud):
    """Degree-0 SH evaluation, clamped to [0,1]; returns colors + clamp mask."""
    c = 0.5 + SH_C0 * cloud.sh_dc
    mask = (c > 0.0) & (c < 1.0)
    return np.clip(c, 0.0, 1.0), mask


def _ground_background(camera: Camera, ground: GroundConfig, cloud: GaussianCloud, dtype):
    """Per-pixel background: checkerboard at the ray-plane hit with the
    vertical-clearance shadow, or the flat background color."""
    h, w = camera.height, camera.width
    if ground is None:
        return np.zeros((h, w, 3), dtype=dtype)
    jj, ii = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    rot = camera.extrinsics.rotation
    tra = camera.extrinsics.translation
    dirs_cam = np.stack([(jj - camera.cx) / camera.fx, (ii - camera.cy) / camera.fy, np.ones_like(jj)], axis=-1)
    dirs = dirs_cam @ rot  # R^T applied to rows
    origin = -rot.T @ tra
    dy = dirs[..., 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(np.abs(dy) > 1e-12, (ground.height - origin[1]) / dy, -1.0)
    hit = s > 1e-9
    px = origin[0] + s * dirs[..., 0]
    pz = origin[2] + s * dirs[..., 2]
    tiles = (np.floor(px / ground.tile_size) + np.floor(pz / ground.tile_size)).astype(np.int64) % 2
    color_a = np.asarray(ground.color_a, dtype=np.float64)
    color_b = np.asarray(ground.color_b, dtype=np.float64)
    tile_color = np.where(tiles[..., None] == 0, color_a, color_b)

    shade = np.ones((h, w))
    if ground.shadow_max > 0 and cloud.kernel_count:
        above = cloud.centers[:, 1] >= ground.height
        if above.any():
            centers = cloud.centers[above]
            r_k = float(np.mean(np.sqrt(np.trace(cloud.covariances, axis1=1, axis2=2) / 3.0)))
            hx = px[hit]
            hz = pz[hit]
            # first kernel center straight up from the hit point
            d2 = (hx[:, None] - centers[None, :, 0]) ** 2 + (hz[:, None] - centers[None, :, 2]) ** 2
            near = d2 <= r_k * r_k
            heights = np.where(near, centers[None, :, 1] - ground.height, np.inf)
            dmin = heights.min(axis=1)
            sh = 1.0 - ground.shadow_max * np.exp(-ground.shadow_decay * np.clip(dmin, 0.0, 1e30))
            shade[hit] = np.where(np.isfinite(dmin), sh, 1.0)
    bg = np.asarray(ground.background, dtype=np.float64)
    out = np.where(hit[..., None], tile_color * shade[..., None], bg)
    return out.astype(dtype)


def _footprint_box(mean2d, cov2d, width, height):
    """Pixel index ranges covered by the 3-sigma ellipse bounding box."""
    tr = cov2d[:, 0, 0] + cov2d[:, 1, 1]
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    disc = np.sqrt(np.maximum(tr * tr / 4.0 - det, 0.0))
    lam_max = tr / 2.0 + disc
    radius = FOOTPRINT_SIGMA * np.sqrt(np.maximum(lam_max, 0.0))
    x0 = np.ceil(mean2d[:, 0] - radius - 0.5).astype(np.int64)
    x1 = np.floor(mean2d[:, 0] + radius - 0.5).astype(np.int64)
    y0 = np.ceil(mean2d[:, 1] - radius - 0.5).astype(np.int64)
    y1 = np.floor(mean2d[:, 1] + radius - 0.5).astype(np.int64)
    x0 = np.clip(x0, 0, width - 1)
    x1 = np.clip(x1, -1, width - 1)
    y0 = np.clip(y0, 0, height - 1)
    y1 = np.clip(y1, -1, height - 1)
    return x0, x1, y0, y1


def _kernel_alpha(mean2d, inv2d, sigma, x0, x1, y0, y1):
    """Opacity field of one kernel over its footprint box."""
    xs = np.arange(x0, x1 + 1) + 0.5
    ys = np.arange(y0, y1 + 1) + 0.5
    dx = xs[None, :] - mean2d[0]
    dy = ys[:, None] - mean2d[1]
    q = inv2d[0, 0] * dx * dx + 2.0 * inv2d[0, 1] * dx * dy + inv2d[1, 1] * dy * dy
    return sigma * np.exp(-0.5 * q), dx, dy, q


def _prepare(cloud, camera, ground):
    xc, mean2d, jac, cov_cam, cov2d, det, valid = _project(cloud, camera)
    sigma = cloud.opacities.copy()
    if ground is not None:
        below = cloud.centers[:, 1] < ground.height
        sigma = np.where(below, 0.0, sigma)
    inv2d = np.empty_like(cov2d)
    safe_det = np.where(valid, det, 1.0)
    inv2d[:, 0, 0] = cov2d[:, 1, 1] / safe_det
    inv2d[:, 1, 1] = cov2d[:, 0, 0] / safe_det
    inv2d[:, 0, 1] = -cov2d[:, 0, 1] / safe_det
    inv2d[:, 1, 0] = -cov2d[:, 1, 0] / safe_det
    order = np.argsort(xc[:, 2], kind="stable")
    x0, x1, y0, y1 = _footprint_box(mean2d, cov2d, camera.width, camera.height)
    colors, color_mask = _colors(cloud)
    live = valid & (sigma > 0.0) & (x1 >= x0) & (y1 >= y0)
    return xc, mean2d, jac, cov_cam, cov2d, inv2d, sigma, order, (x0, x1, y0, y1), colors, color_mask, live


def render(cloud: GaussianCloud, camera: Camera, ground: GroundConfig = None, dtype=np.float32):
    """Rasterize the cloud. Returns (image (H,W,3) in [0,1], alpha (H,W))."""
    h, w = camera.height, camera.width
    xc, mean2d, jac, cov_cam, cov2d, inv2d, sigma, order, boxes, colors, _, live = _prepare(cloud, camera, ground)
    x0, x1, y0, y1 = boxes
    fore = np.zeros((h, w, 3))
    trans = np.ones((h, w))
    for p in order:
        if not live[p]:
            continue
        alpha, _, _, _ = _kernel_alpha(mean2d[p], inv2d[p], sigma[p], x0[p], x1[p], y0[p], y1[p])
        sl = (slice(y0[p], y1[p] + 1), slice(x0[p], x1[p] + 1))
        t_here = trans[sl]
        fore[sl] += (alpha * t_here)[..., None] * colors[p]
        trans[sl] = t_here * (1.0 - alpha)
    background = _ground_background(camera, ground, cloud, np.float64)
    image = fore + trans[..., None] * background
    accum = 1.0 - trans
    return np.clip(image, 0.0, 1.0).astype(dtype), accum.astype(dtype)


def render_adjoint(
    cloud: GaussianCloud,
    camera: Camera,
    ground: GroundConfig,
    image_bar: np.ndarray,
    alpha_bar: np.ndarray = None,
):
    """VJP of render. Returns dict with gradients for centers, covariances,
    opacities, and sh_dc. Cotangents are w.r.t. the pre-clip image; the
    [0,1] image clip is treated as inactive (guidance images live inside)."""
    h, w = camera.height, camera.width
    image_bar = np.asarray(image_bar, dtype=np.float64).reshape(h, w, 3)
    if alpha_bar is None:
        alpha_bar = np.zeros((h, w))
    alpha_bar = np.asarray(alpha_bar, dtype=np.float64).reshape(h, w)

    xc, mean2d, jac, cov_cam, cov2d, inv2d, sigma, order, boxes, colors, color_mask, live = _prepare(
        cloud, camera, ground
    )
    x0, x1, y0, y1 = boxes
    background = _ground_background(camera, ground, cloud, np.float64)

    # forward tape: per-kernel alpha field and entry transmittance
    trans = np.ones((h, w))
    tape = {}
    for p in order:
        if not live[p]:
            continue
        alpha, dx, dy, _ = _kernel_alpha(mean2d[p], inv2d[p], sigma[p], x0[p], x1[p], y0[p], y1[p])
        sl = (slice(y0[p], y1[p] + 1), slice(x0[p], x1[p] + 1))
        tape[p] = (alpha, trans[sl].copy(), dx, dy)
        trans[sl] = trans[sl] * (1.0 - alpha)

    # the background also feels d(final)/d(T) directly; fold it into the
    # suffix composite E below by seeding E with the background color
    grad_centers = np.zeros((cloud.kernel_count, 3))
    grad_cov = np.zeros((cloud.kernel_count, 3, 3))
    grad_sigma = np.zeros(cloud.kernel_count)
    grad_dc = np.zeros((cloud.kernel_count, 3))

    suffix_color = background.copy()  # E
    suffix_trans = np.ones((h, w))  # U
    rot = camera.extrinsics.rotation
    for p in order[::-1]:
        if not live[p]:
            continue
        alpha, t_here, dx, dy = tape[p]
        sl = (slice(y0[p], y1[p] + 1), slice(x0[p], x1[p] + 1))
        e_here = suffix_color[sl]
        u_here = suffix_trans[sl]
        cbar = image_bar[sl]
        abar = alpha_bar[sl]
        # d pixel / d alpha and d accum / d alpha
        dpix_dalpha = t_here[..., None] * (colors[p] - e_here)
        alpha_field_bar = np.einsum("yxc,yxc->yx", cbar, dpix_dalpha) + abar * t_here * u_here
        # color gradient
        col_bar = np.einsum("yxc,yx->c", cbar, alpha * t_here)
        grad_dc[p] = SH_C0 * col_bar * color_mask[p]
        # alpha = sigma * exp(-q/2)
        expq = alpha / sigma[p]
        grad_sigma[p] = float(np.sum(alpha_field_bar * expq))
        qbar = -0.5 * alpha_field_bar * alpha
        # q = M00 dx^2 + 2 M01 dx dy + M11 dy^2; dx is (1,Wb), dy (Hb,1)
        m_bar = np.empty((2, 2))
        m_bar[0, 0] = np.sum(qbar * dx * dx)
        m_bar[1, 1] = np.sum(qbar * dy * dy)
        m01 = np.sum(qbar * dx * dy)
        m_bar[0, 1] = m_bar[1, 0] = m01
        minv = inv2d[p]
        dqd_dx = 2.0 * (minv[0, 0] * dx + minv[0, 1] * dy)
        dqd_dy = 2.0 * (minv[1, 1] * dy + minv[0, 1] * dx)
        mean_bar = -np.array([np.sum(qbar * dqd_dx), np.sum(qbar * dqd_dy)])
        # inv2d -> cov2d
        cov2d_bar = -minv @ m_bar @ minv
        # cov2d = J covc J^T
        jp = jac[p]
        j_bar = (cov2d_bar + cov2d_bar.T) @ jp @ cov_cam[p]
        covc_bar = jp.T @ cov2d_bar @ jp
        grad_cov[p] = rot.T @ covc_bar @ rot
        # mean2d and J both depend on the camera-space center
        fx, fy = camera.fx, camera.fy
        x, y, z = xc[p]
        xc_bar = np.zeros(3)
        xc_bar[0] = mean_bar[0] * fx / z + j_bar[0, 2] * (-fx / z**2)
        xc_bar[1] = mean_bar[1] * fy / z + j_bar[1, 2] * (-fy / z**2)
        xc_bar[2] = (
            mean_bar[0] * (-fx * x / z**2)
            + mean_bar[1] * (-fy * y / z**2)
            + j_bar[0, 0] * (-fx / z**2)
            + j_bar[1, 1] * (-fy / z**2)
            + j_bar[0, 2] * (2.0 * fx * x / z**3)
            + j_bar[1, 2] * (2.0 * fy * y / z**3)
        )
        grad_centers[p] = rot.T @ xc_bar
        # roll the suffix state past this kernel
        suffix_color[sl] = alpha[..., None] * colors[p] + (1.0 - alpha)[..., None] * e_here
        suffix_trans[sl] = (1.0 - alpha) * u_here

    # opacity gradient only flows where the forward mask kept the kernel
    return {
        "centers": grad_centers,
        "covariances": grad_cov,
        "opacities": grad_sigma,
        "sh_dc": grad_dc,
    }
