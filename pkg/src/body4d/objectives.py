"""Training losses, fitting losses, and evaluation metrics.

Losses build tape nodes so gradients reach codes and weights; metrics
are plain numpy functions. Distances keep the units of their inputs
(meters for the toy bodies); report-level unit conversion happens in
the CLI.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensorcore as tc
from .motion_model import MotionBasis
from .tensorcore import Tensor

__all__ = [
    "LossWeights", "vertex_l1", "shape_l2", "total_loss", "prior_terms",
    "chamfer_fit_loss", "p2s_fit_loss", "keypoint_fit_loss",
    "chamfer", "point_to_surface", "closest_on_mesh", "pve",
    "mpjpe_family", "JointErrors", "similarity_align",
    "volumetric_iou", "NonWatertightMesh", "is_watertight",
    "sample_surface", "sample_surface_info",
    "PRIOR_WEIGHTS",
]

PRIOR_WEIGHTS = (1e-2, 1e-3, 1e-3)  # shape, motion Mahalanobis, auxiliary
_EPS = 1e-12


# ---------------------------------------------------------------------------
# training losses

@dataclass(frozen=True)
class LossWeights:
    """Term weights for the two-stage objective."""

    shape: float
    linear: float   # meshes decoded straight from the motion basis
    motion: float   # meshes after motion compensation
    offset: float   # canonical clothing offsets

    @classmethod
    def for_stage(cls, stage: int) -> "LossWeights":
        if stage == 1:
            return cls(shape=1.0, linear=1.0, motion=0.0, offset=0.0)
        if stage == 2:
            return cls(shape=1.0, linear=0.0, motion=1.0, offset=30.0)
        raise ValueError(f"stage must be 1 or 2, got {stage}")


def vertex_l1(x, y) -> Tensor:
    """Mean per-vertex L1 distance over all frames and vertices."""
    x, y = tc.as_tensor(x), tc.as_tensor(y)
    if x.shape != y.shape:
        raise tc.ShapeMismatch(f"vertex_l1 shapes {x.shape} vs {y.shape}")
    n = int(np.prod(x.shape[:-1])) if x.ndim > 1 else 1
    return tc.tsum(tc.tabs(x - y)) * (1.0 / n)


def shape_l2(c, c_star) -> Tensor:
    """Squared L2 between predicted and target shape codes."""
    c, c_star = tc.as_tensor(c), tc.as_tensor(c_star)
    if c.shape != c_star.shape:
        raise tc.ShapeMismatch(f"shape_l2 shapes {c.shape} vs {c_star.shape}")
    d = c - c_star
    return tc.tsum(d * d)


def total_loss(stage: int, outputs: dict, targets: dict,
               weights: LossWeights | None = None) -> Tensor:
    """Combine the stage's active terms.

    Stage 1 needs outputs {c_s, X_linear} and targets {c_s_star,
    Y_body}; stage 2 needs outputs {c_s, X_motion, X_shape} and targets
    {c_s_star, Y_body, Y_offset}. Missing keys raise.
    """
    w = weights or LossWeights.for_stage(stage)

    def need(d, key, side):
        if key not in d:
            raise ValueError(f"stage {stage} requires {side}[{key!r}]")
        return d[key]

    loss = tc.as_tensor(np.float32(0.0))
    if w.shape:
        loss = loss + w.shape * shape_l2(need(outputs, "c_s", "outputs"),
                                         need(targets, "c_s_star", "targets"))
    if w.linear:
        loss = loss + w.linear * vertex_l1(need(outputs, "X_linear", "outputs"),
                                           need(targets, "Y_body", "targets"))
    if w.motion:
        loss = loss + w.motion * vertex_l1(need(outputs, "X_motion", "outputs"),
                                           need(targets, "Y_body", "targets"))
    if w.offset:
        loss = loss + w.offset * vertex_l1(need(outputs, "X_shape", "outputs"),
                                           need(targets, "Y_offset", "targets"))
    return loss


def prior_terms(c_s, c_m, c_a, basis: MotionBasis,
                weights: tuple[float, float, float] = PRIOR_WEIGHTS) -> Tensor:
    """Latent regularizers for auto-decoding.

    Shape and auxiliary codes get plain squared norms; the motion code
    pays Mahalanobis energy under the basis eigenvalues (zero-variance
    directions are excluded from the sum).
    """
    c_s, c_m, c_a = tc.as_tensor(c_s), tc.as_tensor(c_m), tc.as_tensor(c_a)
    lam = np.concatenate([basis.eig_global, basis.eig_body]).astype(np.float64)
    inv = np.where(lam > 1e-12, 1.0 / np.maximum(lam, 1e-12), 0.0).astype(np.float32)
    ws, wm, wa = weights
    out = ws * tc.tsum(c_s * c_s) + wa * tc.tsum(c_a * c_a)
    if inv.size:
        out = out + wm * tc.tsum(c_m * c_m * inv)
    return out


# ---------------------------------------------------------------------------
# fitting losses (tape-recorded, correspondences frozen per evaluation)

def _norms(diff: Tensor) -> Tensor:
    """Row Euclidean norms with a tiny floor so sqrt stays differentiable."""
    return tc.sqrt(tc.tsum(diff * diff, axis=-1) + np.float32(1e-12))


def chamfer_fit_loss(pred_pts: Tensor, obs_pts: np.ndarray) -> Tensor:
    """Symmetric chamfer between predicted points and an observed cloud.

    Nearest neighbors are found on the current values and treated as
    constants; distances stay differentiable in the predictions.
    """
    obs = np.asarray(obs_pts, dtype=np.float32)
    pred = pred_pts.data
    d2 = (np.sum(pred ** 2, axis=1)[:, None] + np.sum(obs ** 2, axis=1)[None, :]
          - 2.0 * pred.astype(np.float64) @ obs.T.astype(np.float64))
    nn_po = np.argmin(d2, axis=1)   # for each pred, nearest obs
    nn_op = np.argmin(d2, axis=0)   # for each obs, nearest pred
    d_po = tc.tmean(_norms(pred_pts - obs[nn_po]))
    d_op = tc.tmean(_norms(tc.gather(pred_pts, nn_op) - obs))
    return 0.5 * d_po + 0.5 * d_op


def p2s_fit_loss(obs_pts: np.ndarray, verts: Tensor, faces: np.ndarray) -> Tensor:
    """One-directional point-to-surface loss: observations onto the mesh.

    The closest triangle and barycentric coordinates are recomputed from
    the current vertices and then frozen for the gradient.
    """
    obs = np.asarray(obs_pts, dtype=np.float32)
    _, tri_idx, bary = closest_on_mesh(obs, verts.data, faces)
    tri = np.asarray(faces, dtype=np.int64)[tri_idx]
    corners = [tc.gather(verts, tri[:, k]) for k in range(3)]
    closest = sum(tc.as_tensor(bary[:, k:k + 1].astype(np.float32)) * corners[k]
                  for k in range(3))
    return tc.tmean(_norms(tc.as_tensor(obs) - closest))


def keypoint_fit_loss(pred_joints: Tensor, obs_joints: np.ndarray) -> Tensor:
    """Mean Euclidean distance between predicted and observed joints."""
    obs = np.asarray(obs_joints, dtype=np.float32)
    flat = tc.reshape(pred_joints, (-1, 3))
    return tc.tmean(_norms(flat - obs.reshape(-1, 3)))


# ---------------------------------------------------------------------------
# metrics

def _pairwise_min(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """min_j ||a_i - b_j|| for each i, chunked to bound memory."""
    out = np.empty(a.shape[0])
    bb = np.sum(b.astype(np.float64) ** 2, axis=1)
    for s in range(0, a.shape[0], 1024):
        blk = a[s:s + 1024].astype(np.float64)
        d2 = np.sum(blk ** 2, axis=1)[:, None] + bb[None, :] - 2.0 * blk @ b.T.astype(np.float64)
        out[s:s + 1024] = np.sqrt(np.maximum(d2.min(axis=1), 0.0))
    return out


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric chamfer distance between two point sets.

    0.5 * mean_a min_b ||a-b|| + 0.5 * mean_b min_a ||a-b||.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer needs nonempty point sets")
    return 0.5 * _pairwise_min(a, b).mean() + 0.5 * _pairwise_min(b, a).mean()


def closest_on_mesh(points: np.ndarray, verts: np.ndarray, faces: np.ndarray):
    """Exact closest point on a triangle mesh for each query point.

    Returns:
        (dist [P], tri_idx [P], bary [P, 3]).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    verts = np.asarray(verts, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    if faces.size == 0:
        raise ValueError("mesh has no faces")
    P = points.shape[0]
    best_d2 = np.full(P, np.inf)
    best_tri = np.zeros(P, dtype=np.int64)
    best_uv = np.zeros((P, 2))
    a, bdir, cdir = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    ab = bdir - a
    ac = cdir - a
    for s in range(0, P, 512):
        p = points[s:s + 512][:, None, :]      # [p, 1, 3]
        u, v = _closest_uv(p, a[None], ab[None], ac[None])
        cp = a[None] + u[..., None] * ab[None] + v[..., None] * ac[None]
        d2 = np.sum((p - cp) ** 2, axis=-1)    # [p, T]
        idx = np.argmin(d2, axis=1)
        rows = np.arange(p.shape[0])
        sl = slice(s, s + p.shape[0])
        best_d2[sl] = d2[rows, idx]
        best_tri[sl] = idx
        best_uv[sl, 0] = u[rows, idx]
        best_uv[sl, 1] = v[rows, idx]
    bary = np.stack([1.0 - best_uv.sum(axis=1), best_uv[:, 0], best_uv[:, 1]], axis=1)
    return np.sqrt(np.maximum(best_d2, 0.0)), best_tri, bary


def _closest_uv(p, a, ab, ac):
    """Barycentric (u, v) of the closest point on each triangle.

    Region walk over the triangle's Voronoi regions (vertices, edges,
    interior); all comparisons vectorized over points x triangles.
    """
    ap = p - a
    d1 = np.sum(ab * ap, axis=-1)
    d2 = np.sum(ac * ap, axis=-1)
    u = np.zeros_like(d1)
    v = np.zeros_like(d1)
    done = (d1 <= 0) & (d2 <= 0)               # vertex A

    bp = p - (a + ab)
    d3 = np.sum(ab * bp, axis=-1)
    d4 = np.sum(ac * bp, axis=-1)
    reg = (~done) & (d3 >= 0) & (d4 <= d3)     # vertex B
    u = np.where(reg, 1.0, u)
    done |= reg

    cp = p - (a + ac)
    d5 = np.sum(ab * cp, axis=-1)
    d6 = np.sum(ac * cp, axis=-1)
    reg = (~done) & (d6 >= 0) & (d5 <= d6)     # vertex C
    v = np.where(reg, 1.0, v)
    done |= reg

    vc = d1 * d4 - d3 * d2
    reg = (~done) & (vc <= 0) & (d1 >= 0) & (d3 <= 0)   # edge AB
    t = d1 / np.where(reg, d1 - d3, 1.0)
    u = np.where(reg, t, u)
    done |= reg

    vb = d5 * d2 - d1 * d6
    reg = (~done) & (vb <= 0) & (d2 >= 0) & (d6 <= 0)   # edge AC
    t = d2 / np.where(reg, d2 - d6, 1.0)
    v = np.where(reg, t, v)
    done |= reg

    va = d3 * d6 - d5 * d4
    reg = (~done) & (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)  # edge BC
    t = (d4 - d3) / np.where(reg, (d4 - d3) + (d5 - d6), 1.0)
    u = np.where(reg, 1.0 - t, u)
    v = np.where(reg, t, v)
    done |= reg

    denom = va + vb + vc
    denom = np.where(np.abs(denom) > _EPS, denom, 1.0)  # degenerate: park at A
    u = np.where(done, u, vb / denom)
    v = np.where(done, v, vc / denom)
    return u, v


def point_to_surface(points: np.ndarray, verts: np.ndarray, faces: np.ndarray) -> float:
    """Mean exact point-to-mesh distance."""
    d, _, _ = closest_on_mesh(points, verts, faces)
    return float(d.mean())


def pve(x: np.ndarray, y: np.ndarray) -> float:
    """Mean per-vertex Euclidean distance (any leading batch shape)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"pve shapes {x.shape} vs {y.shape}")
    return float(np.linalg.norm(x - y, axis=-1).mean())


def similarity_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Best similarity transform (rotation, translation, scale) of pred
    onto gt in the least-squares sense; returns the aligned points."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    pc = pred - mu_p
    gc = gt - mu_g
    h = pc.T @ gc
    u_, s_, vt_ = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt_.T @ u_.T))
    dd = np.ones(3)
    dd[-1] = d
    rot = vt_.T @ np.diag(dd) @ u_.T
    var_p = np.sum(pc ** 2)
    scale = np.sum(s_ * dd) / max(var_p, _EPS)
    return scale * pc @ rot.T + mu_g


class JointErrors(NamedTuple):
    mpjpe: float      # mean per-joint position error
    pa_mpjpe: float   # after per-frame similarity alignment
    accel: float      # error of second finite differences (per frame^2)


def mpjpe_family(pred: np.ndarray, gt: np.ndarray, fps: float | None = None) -> JointErrors:
    """Joint trajectory errors.

    Args:
        pred / gt: [L, J, 3] joint positions.
        fps: when given, acceleration error is rescaled from per-frame^2
            units to per-second^2 by fps**2.

    Acceleration needs L >= 3; shorter inputs report NaN there.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3:
        raise ValueError(f"mpjpe shapes {pred.shape} vs {gt.shape}")
    mpjpe = float(np.linalg.norm(pred - gt, axis=-1).mean())
    aligned = np.stack([similarity_align(p, g) for p, g in zip(pred, gt)])
    pa = float(np.linalg.norm(aligned - gt, axis=-1).mean())
    if pred.shape[0] >= 3:
        acc_p = pred[2:] - 2 * pred[1:-1] + pred[:-2]
        acc_g = gt[2:] - 2 * gt[1:-1] + gt[:-2]
        accel = float(np.linalg.norm(acc_p - acc_g, axis=-1).mean())
        if fps is not None:
            accel *= fps * fps
    else:
        accel = float("nan")
    return JointErrors(mpjpe=mpjpe, pa_mpjpe=pa, accel=accel)


# ---------------------------------------------------------------------------
# volumetric IoU

class NonWatertightMesh(ValueError):
    """Voxel occupancy asked of a mesh with boundary or nonmanifold edges."""


def is_watertight(faces: np.ndarray) -> bool:
    """Every directed edge appears exactly once (closed, consistent)."""
    faces = np.asarray(faces, dtype=np.int64)
    if faces.size == 0:
        return False
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    directed = set(map(tuple, edges))
    if len(directed) != edges.shape[0]:
        return False
    return all((b, a) in directed for a, b in directed)


def _face_components(faces: np.ndarray, n_verts: int) -> np.ndarray:
    parent = np.arange(n_verts)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for f in faces:
        r = find(f[0])
        for k in (1, 2):
            r2 = find(f[k])
            if r2 != r:
                parent[r2] = r
    roots = np.array([find(f[0]) for f in faces])
    _, labels = np.unique(roots, return_inverse=True)
    return labels


def _occupancy(verts, faces, lo, spacing, res) -> np.ndarray:
    """Inside test on voxel centers by x-ray parity, per face component."""
    verts = np.asarray(verts, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    labels = _face_components(faces, verts.shape[0])
    ncomp = labels.max() + 1
    centers = lo[None, :] + (np.arange(res)[:, None] + 0.5) * spacing[None, :]
    # tiny deterministic offset keeps rays away from edges and vertices
    yc = centers[:, 1] + 0.37e-4 * spacing[1]
    zc = centers[:, 2] + 0.61e-4 * spacing[2]
    xc = centers[:, 0]

    a = verts[faces[:, 0]]
    e1 = verts[faces[:, 1]] - a
    e2 = verts[faces[:, 2]] - a
    det = e1[:, 1] * e2[:, 2] - e2[:, 1] * e1[:, 2]   # [F]
    ok = np.abs(det) > 1e-15
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)

    occ = np.zeros((res, res, res), dtype=bool)
    rows_y, rows_z = np.meshgrid(yc, zc, indexing="ij")
    rows_y = rows_y.ravel()
    rows_z = rows_z.ravel()
    n_rows = rows_y.size
    chunk = 256
    for s in range(0, n_rows, chunk):
        ny = rows_y[s:s + chunk][:, None]             # [c, 1]
        nz = rows_z[s:s + chunk][:, None]
        nc = ny.shape[0]
        dy = ny - a[None, :, 1]
        dz = nz - a[None, :, 2]
        u = (dy * e2[None, :, 2] - e2[None, :, 1] * dz) * inv[None, :]
        v = (e1[None, :, 1] * dz - dy * e1[None, :, 2]) * inv[None, :]
        hit = ok[None, :] & (u >= 0) & (v >= 0) & (u + v <= 1)
        xh = a[None, :, 0] + u * e1[None, :, 0] + v * e2[None, :, 0]
        inside_rows = np.zeros((nc, res), dtype=bool)
        for c in range(ncomp):
            mask = hit & (labels == c)[None, :]
            r_idx, f_idx = np.nonzero(mask)
            if r_idx.size == 0:
                continue
            # bin i: the hit lies left of centers i..res-1
            bins = np.searchsorted(xc, xh[r_idx, f_idx], side="right")
            counts = np.bincount(r_idx * (res + 1) + bins,
                                 minlength=nc * (res + 1)).reshape(nc, res + 1)
            before = np.cumsum(counts, axis=1)[:, :res]
            inside_rows |= (before % 2) == 1
        iy = (s + np.arange(nc)) // res
        iz = (s + np.arange(nc)) % res
        occ[:, iy, iz] = inside_rows.T
    return occ


def volumetric_iou(verts_a, faces_a, verts_b, faces_b, resolution: int = 64) -> float:
    """Voxel IoU of two watertight meshes on a shared padded grid.

    Raises:
        NonWatertightMesh: either mesh fails the closed-edge check.
    """
    for name, f in (("first", faces_a), ("second", faces_b)):
        if not is_watertight(f):
            raise NonWatertightMesh(f"{name} mesh is not watertight")
    va = np.asarray(verts_a, dtype=np.float64)
    vb = np.asarray(verts_b, dtype=np.float64)
    lo = np.minimum(va.min(axis=0), vb.min(axis=0))
    hi = np.maximum(va.max(axis=0), vb.max(axis=0))
    pad = 0.05 * max(float((hi - lo).max()), 1e-9)
    lo = lo - pad
    hi = hi + pad
    spacing = (hi - lo) / resolution
    occ_a = _occupancy(va, faces_a, lo, spacing, resolution)
    occ_b = _occupancy(vb, faces_b, lo, spacing, resolution)
    union = np.logical_or(occ_a, occ_b).sum()
    if union == 0:
        return 0.0
    inter = np.logical_and(occ_a, occ_b).sum()
    return float(inter / union)


# ---------------------------------------------------------------------------
# surface sampling

def sample_surface(verts: np.ndarray, faces: np.ndarray, n: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform surface samples; [n, 3]."""
    pts, _, _ = sample_surface_info(verts, faces, n, rng)
    return pts


def sample_surface_info(verts: np.ndarray, faces: np.ndarray, n: int,
                        rng: np.random.Generator):
    """Surface samples plus their (triangle, barycentric) provenance.

    Triangles are drawn with probability proportional to area and the
    barycentric coordinates are uniform over each triangle.

    Returns:
        (points [n, 3] float32, tri_idx [n], bary [n, 3]).
    """
    verts = np.asarray(verts, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    if faces.size == 0:
        raise ValueError("cannot sample a mesh with no faces")
    cross = np.cross(verts[faces[:, 1]] - verts[faces[:, 0]],
                     verts[faces[:, 2]] - verts[faces[:, 0]])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    total = areas.sum()
    if total <= _EPS:
        raise ValueError("mesh surface area is degenerate")
    tri_idx = rng.choice(faces.shape[0], size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    tri = faces[tri_idx]
    pts = (bary[:, 0:1] * verts[tri[:, 0]] + bary[:, 1:2] * verts[tri[:, 1]]
           + bary[:, 2:3] * verts[tri[:, 2]])
    return pts.astype(np.float32), tri_idx, bary
