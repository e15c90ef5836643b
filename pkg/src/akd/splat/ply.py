"""Binary PLY I/O in the de-facto splat layout.

Properties per vertex: x,y,z, f_dc_0..2, f_rest_*, opacity (logit),
scale_0..2 (log of standard deviations), rot_0..3 (wxyz quaternion,
normalized on load). Covariance is reconstructed as R diag(exp(s))^2 R^T.
"""

from __future__ import annotations

import numpy as np

from .cloud import GaussianCloud

_OPACITY_CLIP = 1e-6


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """(N,4) wxyz quaternions (normalized) to rotation matrices."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((q.shape[0], 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def _matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrices to wxyz quaternions (Shepperd's branch selection)."""
    out = np.empty((m.shape[0], 4))
    for i, r in enumerate(m):
        tr = np.trace(r)
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2
            out[i] = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
            out[i] = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif r[1, 1] > r[2, 2]:
            s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
            out[i] = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
            out[i] = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    return out


def save_ply(cloud: GaussianCloud, path):
    """Decompose covariances into scales/rotations and write binary PLY."""
    p = cloud.kernel_count
    eigval, eigvec = np.linalg.eigh(cloud.covariances)
    # eigh is ascending; flip improper rotations
    dets = np.linalg.det(eigvec)
    eigvec = eigvec.copy()
    eigvec[dets < 0, :, 0] *= -1.0
    scales = 0.5 * np.log(np.maximum(eigval, 1e-300))
    quats = _matrix_to_quat(eigvec)
    sigma = np.clip(cloud.opacities, _OPACITY_CLIP, 1.0 - _OPACITY_CLIP)
    logits = np.log(sigma / (1.0 - sigma))

    k_rest = cloud.sh_rest.shape[1]
    names = (
        ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
        + [f"f_rest_{i}" for i in range(k_rest)]
        + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    )
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {p}"]
    header += [f"property float {n}" for n in names]
    header.append("end_header")
    data = np.empty((p, len(names)), dtype="<f4")
    data[:, 0:3] = cloud.centers
    data[:, 3:6] = cloud.sh_dc
    if k_rest:
        data[:, 6 : 6 + k_rest] = cloud.sh_rest
    col = 6 + k_rest
    data[:, col] = logits
    data[:, col + 1 : col + 4] = scales
    data[:, col + 4 : col + 8] = quats
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def load_ply(path) -> GaussianCloud:
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"end_header\n")
    if end < 0 or not blob.startswith(b"ply"):
        raise ValueError(f"not a PLY file: {path}")
    header = blob[:end].decode("ascii").splitlines()
    body = blob[end + len(b"end_header\n") :]
    count = None
    names = []
    fmt_ok = False
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt_ok = parts[1] == "binary_little_endian"
        elif parts[0] == "element" and parts[1] == "vertex":
            count = int(parts[2])
        elif parts[0] == "property" and count is not None:
            if parts[1] != "float":
                raise ValueError(f"unsupported property type {parts[1]}")
            names.append(parts[2])
    if not fmt_ok:
        raise ValueError("only binary_little_endian PLY is supported")
    if count is None:
        raise ValueError("no vertex element in PLY header")
    cols = len(names)
    data = np.frombuffer(body[: count * cols * 4], dtype="<f4").reshape(count, cols).astype(np.float64)
    idx = {n: i for i, n in enumerate(names)}
    for required in ["x", "y", "z", "f_dc_0", "opacity", "scale_0", "rot_0"]:
        if required not in idx:
            raise ValueError(f"missing PLY property {required}")
    centers = data[:, [idx["x"], idx["y"], idx["z"]]]
    sh_dc = data[:, [idx["f_dc_0"], idx["f_dc_1"], idx["f_dc_2"]]]
    rest_names = sorted((n for n in names if n.startswith("f_rest_")), key=lambda n: int(n.split("_")[-1]))
    sh_rest = data[:, [idx[n] for n in rest_names]] if rest_names else np.zeros((count, 0))
    opac = 1.0 / (1.0 + np.exp(-data[:, idx["opacity"]]))
    scales = np.exp(data[:, [idx["scale_0"], idx["scale_1"], idx["scale_2"]]])
    quats = data[:, [idx["rot_0"], idx["rot_1"], idx["rot_2"], idx["rot_3"]]]
    quats = quats / np.linalg.norm(quats, axis=1, keepdims=True)
    rot = _quat_to_matrix(quats)
    cov = rot @ (scales[:, :, None] ** 2 * np.swapaxes(rot, -1, -2))
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    return GaussianCloud(opacities=opac, centers=centers, covariances=cov, sh_dc=sh_dc, sh_rest=sh_rest)
