"""Heat-diffusion skinning weights on a guide mesh, transferred to kernels.

Pipeline: cotangent Laplacian on the reference mesh, per-bone visibility
via segment-triangle tests, a per-bone screened Poisson solve
(-L + H^b) w^b = H^b p^b, then barycentric transfer of the weight rows to
arbitrary points (Gaussian kernel centers) through closest-point queries.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from .skeleton import Skeleton

# vertices closer to a bone than this still get a finite heat coefficient
DISTANCE_FLOOR = 1e-4
# cotangent clamp for degenerate triangles
COT_CLAMP = 1e4


@dataclass
class Mesh:
    """Triangle mesh; component_labels computed from face connectivity."""

    vertices: np.ndarray
    faces: np.ndarray
    component_labels: np.ndarray = field(default=None)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        v = self.vertices.shape[0]
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= v):
            raise ValueError("face index out of range")
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
        if np.any(areas <= 1e-12):
            raise ValueError(f"{int(np.sum(areas <= 1e-12))} degenerate faces (area <= 1e-12)")
        if self.component_labels is None:
            rows = self.faces[:, [0, 1, 2]].ravel()
            cols = self.faces[:, [1, 2, 0]].ravel()
            adj = sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(v, v))
            _, labels = connected_components(adj, directed=False)
            self.component_labels = labels
        else:
            self.component_labels = np.asarray(self.component_labels, dtype=np.int64)

    @property
    def vertex_count(self) -> int:
        return self.vertices.shape[0]


@dataclass
class SkinWeights:
    """Per-vertex bone weights; rows are convex combinations."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        rows = self.matrix.sum(axis=1)
        if np.any(self.matrix < -1e-12) or np.abs(rows - 1.0).max() > 1e-8:
            raise ValueError("weight rows must be nonnegative and sum to 1")


# ---------------------------------------------------------------------------
# OBJ I/O

def load_obj(path) -> Mesh:
    """ASCII OBJ, `v` and `f` records; polygon faces are fan-triangulated."""
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                if any(i < 0 for i in idx):
                    raise ValueError("negative OBJ indices not supported")
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    if not verts:
        raise ValueError(f"no vertices in {path}")
    return Mesh(vertices=np.asarray(verts), faces=np.asarray(faces, dtype=np.int64))


def save_obj(mesh: Mesh, path):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


# ---------------------------------------------------------------------------
# cotangent Laplacian

def cotangent_laplacian(mesh: Mesh) -> sp.csr_matrix:
    """Symmetric cotangent Laplacian, row sums zero; -L is positive semidefinite.

    Off-diagonal (i,j) gets 0.5*(cot alpha + cot beta) over the triangles
    sharing edge ij; degenerate-angle cotangents are clamped to +-1e4.
    """
    v_count = mesh.vertex_count
    tris = mesh.faces
    pts = mesh.vertices
    rows, cols, vals = [], [], []
    for k in range(3):
        i = tris[:, k]
        j = tris[:, (k + 1) % 3]
        o = tris[:, (k + 2) % 3]  # vertex opposite edge (i,j)
        e1 = pts[i] - pts[o]
        e2 = pts[j] - pts[o]
        cross = np.linalg.norm(np.cross(e1, e2), axis=1)
        cot = np.einsum("ij,ij->i", e1, e2) / np.maximum(cross, 1e-300)
        cot = np.clip(cot, -COT_CLAMP, COT_CLAMP)
        w = 0.5 * cot
        rows.extend([i, j])
        cols.extend([j, i])
        vals.extend([w, w])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    lap = sp.coo_matrix((vals, (rows, cols)), shape=(v_count, v_count)).tocsr()
    lap.setdiag(-np.asarray(lap.sum(axis=1)).ravel() + lap.diagonal())
    # setdiag on a freshly summed matrix: diagonal currently 0, so the line
    # above writes exactly -rowsum of the off-diagonals
    return lap


# ---------------------------------------------------------------------------
# bone visibility

def bone_segments(skeleton: Skeleton, rest_transforms) -> np.ndarray:
    """(B,2,3) world endpoints of each bone's major-axis segment.

    The segment spans the cuboid along its longest half-extent, through the
    bone frame origin.
    """
    out = np.zeros((skeleton.bone_count, 2, 3))
    for b, bone in enumerate(skeleton.bones):
        axis = int(np.argmax(bone.half_extents))
        ext = np.zeros(3)
        ext[axis] = bone.half_extents[axis]
        t = rest_transforms[b]
        out[b, 0] = t.apply(-ext)
        out[b, 1] = t.apply(ext)
    return out


def _closest_on_segments(points: np.ndarray, seg: np.ndarray):
    """Closest point on each segment for each point: (V,B,3) and (V,B) distances."""
    a = seg[:, 0]  # (B,3)
    d = seg[:, 1] - seg[:, 0]
    dd = np.einsum("bi,bi->b", d, d)
    ap = points[:, None, :] - a[None, :, :]  # (V,B,3)
    t = np.einsum("vbi,bi->vb", ap, d) / np.maximum(dd, 1e-300)
    t = np.clip(t, 0.0, 1.0)
    closest = a[None] + t[..., None] * d[None]
    dist = np.linalg.norm(points[:, None, :] - closest, axis=2)
    return closest, dist


def _segments_blocked(origins, targets, mesh: Mesh, chunk=256) -> np.ndarray:
    """True where the open segment origin->target crosses a mesh triangle.

    Strict-interior Moller-Trumbore: grazing contact along edges or at the
    endpoints does not block, which also discards the triangles incident to
    the originating vertex.
    """
    a = mesh.vertices[mesh.faces[:, 0]]
    e1 = mesh.vertices[mesh.faces[:, 1]] - a
    e2 = mesh.vertices[mesh.faces[:, 2]] - a
    s_count = origins.shape[0]
    blocked = np.zeros(s_count, dtype=bool)
    eps = 1e-9
    for lo in range(0, s_count, chunk):
        hi = min(lo + chunk, s_count)
        o = origins[lo:hi]
        d = targets[lo:hi] - o
        pvec = np.cross(d[:, None, :], e2[None, :, :])  # (S,T,3)
        det = np.einsum("tj,stj->st", e1, pvec)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.where(np.abs(det) > 1e-12, 1.0 / det, 0.0)
        tvec = o[:, None, :] - a[None, :, :]
        u = np.einsum("stj,stj->st", tvec, pvec) * inv
        qvec = np.cross(tvec, e1[None, :, :])
        v = np.einsum("sj,stj->st", d, qvec) * inv
        t = np.einsum("tj,stj->st", e2, qvec) * inv
        hit = (
            (np.abs(det) > 1e-12)
            & (u > eps)
            & (v > eps)
            & (u + v < 1.0 - eps)
            & (t > eps)
            & (t < 1.0 - eps)
        )
        blocked[lo:hi] = hit.any(axis=1)
    return blocked


def bone_visibility(mesh: Mesh, skeleton: Skeleton, rest_transforms):
    """Per-vertex bone visibility and distances.

    Returns (visible: V×B bool, dist: V×B float). A bone is visible from a
    vertex when the open segment to the closest point on the bone's segment
    stays inside the mesh (no transversal triangle crossing).
    """
    seg = bone_segments(skeleton, rest_transforms)
    closest, dist = _closest_on_segments(mesh.vertices, seg)
    v_count, b_count = dist.shape
    origins = np.repeat(mesh.vertices, b_count, axis=0)
    targets = closest.reshape(-1, 3)
    blocked = _segments_blocked(origins, targets, mesh)
    visible = ~blocked.reshape(v_count, b_count)
    return visible, dist


# ---------------------------------------------------------------------------
# weight solve

def solve_weights(mesh: Mesh, laplacian: sp.spmatrix, visibility: np.ndarray, distances: np.ndarray, c: float = 1.0) -> SkinWeights:
    """Screened Poisson solve per bone, then clamp to [0,1] and row-normalize.

    Components from which no bone is visible at all get their nearest bone
    marked visible first; a component that still yields a singular system is
    reported by label.
    """
    v_count, b_count = visibility.shape
    visibility = visibility.copy()
    labels = mesh.component_labels
    d = np.maximum(np.asarray(distances, dtype=np.float64), DISTANCE_FLOOR)

    for comp in np.unique(labels):
        in_comp = labels == comp
        if not visibility[in_comp].any():
            # nearest bone over the whole component becomes visible
            sub = d[in_comp]
            b_star = int(np.unravel_index(np.argmin(sub), sub.shape)[1])
            visibility[in_comp, b_star] = True

    h = np.where(visibility, c / (d * d), 0.0)
    d_vis = np.where(visibility, d, np.inf)
    nearest = np.argmin(d_vis, axis=1)
    any_vis = visibility.any(axis=1)
    # nearest-bone indicator; exact distance ties are split evenly so that
    # mirror-symmetric rigs produce mirror-symmetric weights
    d_min = d_vis.min(axis=1)
    tied = np.isclose(d_vis, d_min[:, None], rtol=1e-9, atol=1e-12) & visibility
    p = np.zeros((v_count, b_count))
    counts = tied.sum(axis=1)
    rows = any_vis & (counts > 0)
    p[rows] = tied[rows] / counts[rows, None]

    neg_l = (-laplacian).tocsr()
    weights = np.zeros((v_count, b_count))
    comp_of = {comp: np.where(labels == comp)[0] for comp in np.unique(labels)}
    for b in range(b_count):
        comps = np.unique(labels[visibility[:, b]])
        if comps.size == 0:
            continue
        idx = np.concatenate([comp_of[cc] for cc in comps])
        idx.sort()
        mat = (neg_l[idx][:, idx] + sp.diags(h[idx, b])).tocsc()
        rhs = h[idx, b] * p[idx, b]
        try:
            sol = splu(mat).solve(rhs)
        except RuntimeError as err:
            raise ValueError(f"singular skinning system for bone {b} on components {comps.tolist()}: {err}") from err
        if not np.all(np.isfinite(sol)):
            raise ValueError(f"singular skinning system for bone {b} on components {comps.tolist()}")
        weights[idx, b] = sol

    weights = np.clip(weights, 0.0, 1.0)
    sums = weights.sum(axis=1)
    dead = sums < 1e-12
    if np.any(dead):
        # no diffusion reached these vertices; snap to the nearest visible bone
        weights[dead] = 0.0
        weights[np.where(dead)[0], nearest[dead]] = 1.0
        sums = weights.sum(axis=1)
    return SkinWeights(matrix=weights / sums[:, None])


# ---------------------------------------------------------------------------
# closest point on mesh + barycentric transfer

def _closest_point_triangles(p, a, b, c):
    """Closest point on triangle abc for each point, with barycentrics.

    Vectorized region walk; p,a,b,c broadcast to a common shape (...,3).
    Returns (point, bary) of shapes (...,3) and (...,3).
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("...i,...i->...", ab, ap)
    d2 = np.einsum("...i,...i->...", ac, ap)
    bp = p - b
    d3 = np.einsum("...i,...i->...", ab, bp)
    d4 = np.einsum("...i,...i->...", ac, bp)
    cp = p - c
    d5 = np.einsum("...i,...i->...", ab, cp)
    d6 = np.einsum("...i,...i->...", ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4
    shape = va.shape
    u = np.zeros(shape)
    v = np.zeros(shape)
    w = np.zeros(shape)
    done = np.zeros(shape, dtype=bool)

    def assign(mask, uu, vv, ww):
        nonlocal done
        m = mask & ~done
        u[m] = np.broadcast_to(uu, shape)[m] if np.ndim(uu) else uu
        v[m] = np.broadcast_to(vv, shape)[m] if np.ndim(vv) else vv
        w[m] = np.broadcast_to(ww, shape)[m] if np.ndim(ww) else ww
        done |= mask

    assign((d1 <= 0) & (d2 <= 0), 1.0, 0.0, 0.0)
    assign((d3 >= 0) & (d4 <= d3), 0.0, 1.0, 0.0)
    assign((d6 >= 0) & (d5 <= d6), 0.0, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = np.where(np.abs(d1 - d3) > 1e-300, d1 / (d1 - d3), 0.0)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1.0 - t_ab, t_ab, 0.0)
        t_ac = np.where(np.abs(d2 - d6) > 1e-300, d2 / (d2 - d6), 0.0)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1.0 - t_ac, 0.0, t_ac)
        denom_bc = (d4 - d3) + (d5 - d6)
        t_bc = np.where(np.abs(denom_bc) > 1e-300, (d4 - d3) / np.where(np.abs(denom_bc) > 1e-300, denom_bc, 1.0), 0.0)
        assign((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), 0.0, 1.0 - t_bc, t_bc)
        tot = va + vb + vc
        inv = np.where(np.abs(tot) > 1e-300, 1.0 / np.where(np.abs(tot) > 1e-300, tot, 1.0), 0.0)
        vv = vb * inv
        ww = vc * inv
        assign(np.ones(shape, dtype=bool), 1.0 - vv - ww, vv, ww)

    bary = np.stack([u, v, w], axis=-1)
    point = u[..., None] * a + v[..., None] * b + w[..., None] * c
    return point, bary


def closest_point_on_mesh(mesh: Mesh, points: np.ndarray, chunk: int = 128):
    """Closest surface point for each query: (points, face index, barycentric)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(points)):
        raise ValueError("non-finite query point")
    a = mesh.vertices[mesh.faces[:, 0]]
    b = mesh.vertices[mesh.faces[:, 1]]
    c = mesh.vertices[mesh.faces[:, 2]]
    n = points.shape[0]
    out_pts = np.zeros((n, 3))
    out_face = np.zeros(n, dtype=np.int64)
    out_bary = np.zeros((n, 3))
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        p = points[lo:hi, None, :]  # (S,1,3)
        cand, bary = _closest_point_triangles(p, a[None], b[None], c[None])
        d2 = np.einsum("stj,stj->st", points[lo:hi, None, :] - cand, points[lo:hi, None, :] - cand)
        best = np.argmin(d2, axis=1)
        rows = np.arange(hi - lo)
        out_pts[lo:hi] = cand[rows, best]
        out_face[lo:hi] = best
        out_bary[lo:hi] = bary[rows, best]
    return out_pts, out_face, out_bary


def transfer_to_kernels(weights: SkinWeights, mesh: Mesh, kernel_centers: np.ndarray) -> np.ndarray:
    """Barycentric interpolation of vertex weight rows at each kernel's
    closest surface point. Rows sum to 1 by convexity."""
    _, face, bary = closest_point_on_mesh(mesh, kernel_centers)
    tri = mesh.faces[face]  # (P,3)
    rows = np.einsum("pk,pkb->pb", bary, weights.matrix[tri])
    # convex combination of unit-sum rows; renormalize only to scrub fp dust
    return rows / rows.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# AKDW weight file

_AKDW_MAGIC = b"AKDW"


def save_weights(weights, path):
    arr = weights.matrix if isinstance(weights, SkinWeights) else np.asarray(weights, dtype=np.float64)
    v, b = arr.shape
    with open(path, "wb") as fh:
        fh.write(_AKDW_MAGIC)
        fh.write(struct.pack("<II", v, b))
        fh.write(arr.astype("<f4").tobytes())


def load_weights(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _AKDW_MAGIC:
            raise ValueError(f"bad weights magic {magic!r}")
        v, b = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(v * b * 4), dtype="<f4")
        if data.size != v * b:
            raise ValueError("truncated weights file")
        weights = data.reshape(v, b).astype(np.float64)
        sums = weights.sum(axis=1)
        # f32 storage quantizes away exact partition of unity; validate
        # loosely against corruption, then renormalize to restore it
        if np.any(weights < -1e-6) or np.abs(sums - 1.0).max() > 1e-3:
            raise ValueError("weight rows must be nonnegative and sum to 1")
        return np.clip(weights, 0.0, None) / sums[:, None]
