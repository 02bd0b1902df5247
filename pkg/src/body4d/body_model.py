"""Parametric skinned body: shape blending, kinematics, and LBS.

The model follows the common vertex-based skinning recipe: a template
mesh plus linear shape blend shapes, joints regressed from the shaped
vertices, a kinematic tree posed by per-joint axis-angle rotations, and
linear blend skinning with per-vertex joint weights. Pose-dependent
blend shapes are intentionally absent; the recurrent compensation
networks own that correction.

All geometry ops run on the tape (inputs may be plain arrays or
tensors), so gradients flow from posed vertices back to shape, pose,
and offset inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

__all__ = [
    "BodyModel", "rodrigues", "shape_vertices", "regress_joints",
    "forward_kinematics", "skin_lbs", "skin_sequence", "decode_sequence",
    "joint_positions", "make_toy_model", "vertex_normals",
    "save_model", "load_model",
]


@dataclass(frozen=True)
class BodyModel:
    """Static model data; arrays are float32 except the integer tables.

    template: [V, 3] rest vertices.
    shape_basis: [V, 3, S] linear shape displacements.
    joint_regressor: [J, V], rows sum to 1.
    skin_weights: [V, J], rows nonnegative and summing to 1.
    parents: [J] kinematic tree, parents[0] == -1 and parents[i] < i.
    faces: [F, 3] triangle indices.
    """

    template: np.ndarray
    shape_basis: np.ndarray
    joint_regressor: np.ndarray
    skin_weights: np.ndarray
    parents: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.validate()

    @property
    def num_verts(self) -> int:
        return self.template.shape[0]

    @property
    def num_joints(self) -> int:
        return self.parents.shape[0]

    @property
    def shape_dims(self) -> int:
        return self.shape_basis.shape[2]

    def validate(self) -> None:
        V, J, S = self.num_verts, self.num_joints, self.shape_dims
        if self.template.shape != (V, 3):
            raise ValueError(f"template shape {self.template.shape}")
        if self.shape_basis.shape != (V, 3, S):
            raise ValueError(f"shape_basis shape {self.shape_basis.shape}")
        if self.joint_regressor.shape != (J, V):
            raise ValueError(f"joint_regressor shape {self.joint_regressor.shape}")
        if self.skin_weights.shape != (V, J):
            raise ValueError(f"skin_weights shape {self.skin_weights.shape}")
        if self.parents[0] != -1:
            raise ValueError("parents[0] must be -1 (root)")
        if np.any(self.parents[1:] >= np.arange(1, J)):
            raise ValueError("parents[i] must precede i")
        if not np.allclose(self.joint_regressor.sum(axis=1), 1.0, atol=1e-4):
            raise ValueError("joint_regressor rows must sum to 1")
        if np.any(self.skin_weights < -1e-7):
            raise ValueError("skin_weights must be nonnegative")
        if not np.allclose(self.skin_weights.sum(axis=1), 1.0, atol=1e-4):
            raise ValueError("skin_weights rows must sum to 1")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= V):
            raise ValueError("face indices out of range")


class SkinResult(NamedTuple):
    verts: Tensor   # [L, V, 3]
    joints: Tensor  # [L, J, 3] posed joint positions


# ---------------------------------------------------------------------------
# rotations

def _rodrigues_forward(r: np.ndarray):
    """Axis-angle [..., 3] to rotation matrices, with intermediates."""
    r = r.astype(np.float64)
    theta2 = np.sum(r * r, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < 1e-4
    safe2 = np.where(small, 1.0, theta2)
    safe = np.where(small, 1.0, theta)
    f = np.where(small, 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
                 np.sin(safe) / safe)
    g = np.where(small, 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
                 (1.0 - np.cos(safe)) / safe2)
    S = np.zeros(r.shape[:-1] + (3, 3))
    x, y, z = r[..., 0], r[..., 1], r[..., 2]
    S[..., 0, 1], S[..., 0, 2] = -z, y
    S[..., 1, 0], S[..., 1, 2] = z, -x
    S[..., 2, 0], S[..., 2, 1] = -y, x
    S2 = S @ S
    R = np.eye(3) + f[..., None, None] * S + g[..., None, None] * S2
    return R, r, theta, theta2, S, f, g, small


def _vex(M: np.ndarray) -> np.ndarray:
    return np.stack([M[..., 2, 1] - M[..., 1, 2],
                     M[..., 0, 2] - M[..., 2, 0],
                     M[..., 1, 0] - M[..., 0, 1]], axis=-1)


def rodrigues(axis_angle) -> Tensor:
    """Axis-angle vectors to rotation matrices.

    Args:
        axis_angle: [..., 3]; the norm is the rotation angle in radians.
            Small angles take a series limit, so the map is smooth
            through zero.

    Returns:
        [..., 3, 3] rotation matrices.
    """
    aa = tc.as_tensor(axis_angle)
    if aa.shape[-1] != 3:
        raise tc.ShapeMismatch(f"axis_angle last dim must be 3, got {aa.shape}")
    R, r, theta, theta2, S, f, g, small = _rodrigues_forward(aa.data)

    def vjp(gbar):
        G = gbar.astype(np.float64)
        safe3 = np.where(small, 1.0, theta2 * theta)
        safe4 = np.where(small, 1.0, theta2 * theta2)
        # d/d(theta) of the sin/cos coefficients, divided by theta
        u = np.where(small, -1.0 / 3.0 + theta2 / 30.0,
                     (theta * np.cos(theta) - np.sin(theta)) / safe3)
        v = np.where(small, -1.0 / 12.0 + theta2 / 180.0,
                     (theta * np.sin(theta) - 2.0 * (1.0 - np.cos(theta))) / safe4)
        A = np.sum(G * S, axis=(-2, -1))
        B = np.sum(G * (S @ S), axis=(-2, -1))
        St = np.swapaxes(S, -1, -2)
        P = G @ St + St @ G
        grad = ((u * A + v * B)[..., None] * r
                + f[..., None] * _vex(G)
                + g[..., None] * _vex(P))
        return (grad.astype(np.float32),)

    return tc.custom(R, (aa,), vjp)


# ---------------------------------------------------------------------------
# shape and kinematics

def shape_vertices(model: BodyModel, beta) -> Tensor:
    """Template plus linear shape displacements; beta is [S]."""
    beta = tc.as_tensor(beta)
    V = model.num_verts
    basis = model.shape_basis.reshape(V * 3, model.shape_dims)
    disp = tc.reshape(tc.matmul(tc.as_tensor(basis), beta), (V, 3))
    return tc.as_tensor(model.template) + disp


def regress_joints(model: BodyModel, verts) -> Tensor:
    """Rest joint locations as convex-ish combinations of vertices."""
    return tc.matmul(tc.as_tensor(model.joint_regressor), tc.as_tensor(verts))


def _fk_transforms(theta, rest_joints, parents: np.ndarray, root_translation=None):
    """Global joint transforms for a pose sequence.

    Args:
        theta: [L, J, 3] axis-angle per joint.
        rest_joints: [J, 3] rest positions (may require grad).
        root_translation: optional [L, 3].

    Returns:
        (globals_list, posed_joints): J tensors of [L, 4, 4], and [L, J, 3].
    """
    theta = tc.as_tensor(theta)
    L, J = theta.shape[0], theta.shape[1]
    R_all = rodrigues(tc.reshape(theta, (L * J, 3)))
    R_all = tc.reshape(R_all, (L, J, 3, 3))
    bottom = tc.as_tensor(np.tile(np.array([0, 0, 0, 1], np.float32), (L, 1, 1)))
    ones_col = tc.as_tensor(np.ones((L, 1, 1), np.float32))

    def joint_rot(j):
        return tc.reshape(tc.narrow(R_all, 1, j, 1), (L, 3, 3))

    def rest_row(j):
        return tc.reshape(tc.narrow(tc.as_tensor(rest_joints), 0, j, 1), (3,))

    globals_: list[Tensor] = []
    for j in range(J):
        R_j = joint_rot(j)
        if j == 0:
            off = rest_row(0)
            if root_translation is not None:
                t_col = tc.reshape(tc.as_tensor(root_translation) + tc.reshape(off, (1, 3)),
                                   (L, 3, 1))
            else:
                t_col = tc.mul(tc.reshape(off, (1, 3, 1)), ones_col)
            local = tc.concat([tc.concat([R_j, t_col], axis=2), bottom], axis=1)
            globals_.append(local)
        else:
            off = rest_row(j) - rest_row(int(parents[j]))
            t_col = tc.mul(tc.reshape(off, (1, 3, 1)), ones_col)
            local = tc.concat([tc.concat([R_j, t_col], axis=2), bottom], axis=1)
            globals_.append(tc.matmul(globals_[int(parents[j])], local))
    posed = tc.concat(
        [tc.reshape(tc.narrow(tc.narrow(G, 1, 0, 3), 2, 3, 1), (L, 1, 3)) for G in globals_],
        axis=1)
    return globals_, posed


def forward_kinematics(pose, rest_joints, parents, root_translation=None) -> Tensor:
    """Global transforms [J, 4, 4] for a single pose [J, 3]."""
    pose = tc.as_tensor(pose)
    J = pose.shape[0]
    trans = None
    if root_translation is not None:
        trans = tc.reshape(tc.as_tensor(root_translation), (1, 3))
    globals_, _ = _fk_transforms(tc.reshape(pose, (1, J, 3)), rest_joints,
                                 np.asarray(parents), trans)
    return tc.reshape(tc.concat(globals_, axis=0), (J, 4, 4))


# ---------------------------------------------------------------------------
# skinning

def skin_sequence(model: BodyModel, beta, pose_seq, offsets=None,
                  root_translation=None) -> SkinResult:
    """Pose a whole sequence with linear blend skinning.

    Args:
        model: body model.
        beta: [S] shape coefficients.
        pose_seq: [L, 72] or [L, J, 3] axis-angle poses.
        offsets: optional canonical-space vertex offsets, [V, 3] or
            [L, V, 3], added before skinning.
        root_translation: optional [L, 3] root offset in meters.

    Returns:
        SkinResult with posed vertices [L, V, 3] and joints [L, J, 3].
    """
    V, J = model.num_verts, model.num_joints
    pose_seq = tc.as_tensor(pose_seq)
    if pose_seq.ndim == 2 and pose_seq.shape[1] == 3 * J:
        pose_seq = tc.reshape(pose_seq, (pose_seq.shape[0], J, 3))
    if pose_seq.ndim != 3 or pose_seq.shape[1:] != (J, 3):
        raise tc.ShapeMismatch(f"pose_seq shape {pose_seq.shape} for J={J}")
    L = pose_seq.shape[0]

    shaped = shape_vertices(model, beta)            # [V, 3]
    rest = regress_joints(model, shaped)            # [J, 3]
    globals_, posed_joints = _fk_transforms(pose_seq, rest, model.parents,
                                            root_translation)

    # skinning transform per joint: rotation block and a translation that
    # re-centers the rest joint at the origin before rotating
    parts = []
    for j in range(J):
        G = globals_[j]
        rot = tc.reshape(tc.narrow(tc.narrow(G, 1, 0, 3), 2, 0, 3), (L, 3, 3))
        gt = tc.reshape(tc.narrow(tc.narrow(G, 1, 0, 3), 2, 3, 1), (L, 3))
        rest_j = tc.reshape(tc.narrow(rest, 0, j, 1), (3, 1))
        shift = tc.reshape(tc.matmul(rot, rest_j), (L, 3))
        parts.append(tc.reshape(tc.concat([tc.reshape(rot, (L, 9)), gt - shift], axis=1),
                                (L, 1, 12)))
    A = tc.concat(parts, axis=1)                    # [L, J, 12]
    T = tc.matmul(tc.as_tensor(model.skin_weights), A)  # [L, V, 12]

    X = tc.reshape(shaped, (1, V, 3))
    if offsets is not None:
        off = tc.as_tensor(offsets)
        if off.ndim == 2:
            off = tc.reshape(off, (1, V, 3))
        X = X + off                                  # [1 or L, V, 3]
    Xcol = tc.reshape(X, (X.shape[0], V, 1, 3))
    Rb = tc.reshape(tc.narrow(T, 2, 0, 9), (L, V, 3, 3))
    tb = tc.narrow(T, 2, 9, 3)
    verts = tc.tsum(tc.mul(Rb, Xcol), axis=3) + tb
    return SkinResult(verts=verts, joints=posed_joints)


def skin_lbs(model: BodyModel, beta, pose, offsets=None, root_translation=None) -> Tensor:
    """Single-frame skinning; pose is [J, 3] or [72]. Returns [V, 3]."""
    pose = tc.as_tensor(pose)
    J = model.num_joints
    pose2 = tc.reshape(pose, (1, J, 3))
    trans = None
    if root_translation is not None:
        trans = tc.reshape(tc.as_tensor(root_translation), (1, 3))
    out = skin_sequence(model, beta, pose2, offsets, trans)
    return tc.reshape(out.verts, (model.num_verts, 3))


def decode_sequence(model: BodyModel, beta, pose_seq, offsets=None,
                    root_translation=None) -> np.ndarray:
    """Numpy convenience: posed vertices [L, V, 3] without recording."""
    with tc.no_grad():
        return skin_sequence(model, beta, pose_seq, offsets, root_translation).verts.data


def joint_positions(model: BodyModel, beta, pose_seq) -> np.ndarray:
    """Numpy convenience: posed joints [L, J, 3] without recording."""
    with tc.no_grad():
        return skin_sequence(model, beta, pose_seq).joints.data


# ---------------------------------------------------------------------------
# persistence

def save_model(model: BodyModel, path) -> None:
    from .dataio import write_archive
    write_archive(path, {
        "template": model.template,
        "shape_basis": model.shape_basis,
        "joint_regressor": model.joint_regressor,
        "skin_weights": model.skin_weights,
        "parents": model.parents.astype(np.float32),
        "faces": model.faces.astype(np.float32),
    })


def load_model(path) -> BodyModel:
    from .dataio import read_archive
    e = read_archive(path)
    return BodyModel(
        template=e["template"], shape_basis=e["shape_basis"],
        joint_regressor=e["joint_regressor"], skin_weights=e["skin_weights"],
        parents=e["parents"].astype(np.int64),
        faces=e["faces"].astype(np.int64))


# ---------------------------------------------------------------------------
# toy model generation

_HUMANOID_PARENTS = np.array(
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21],
    dtype=np.int64)

_HUMANOID_JOINTS = np.array([
    [0.00, 0.95, 0.00],   # pelvis
    [0.09, 0.91, 0.00], [-0.09, 0.91, 0.00], [0.00, 1.05, 0.00],
    [0.10, 0.50, 0.00], [-0.10, 0.50, 0.00], [0.00, 1.15, 0.00],
    [0.11, 0.08, 0.00], [-0.11, 0.08, 0.00], [0.00, 1.25, 0.00],
    [0.12, 0.02, 0.10], [-0.12, 0.02, 0.10],
    [0.00, 1.40, 0.00], [0.07, 1.35, 0.00], [-0.07, 1.35, 0.00],
    [0.00, 1.55, 0.00],
    [0.18, 1.35, 0.00], [-0.18, 1.35, 0.00],
    [0.45, 1.33, 0.00], [-0.45, 1.33, 0.00],
    [0.70, 1.32, 0.00], [-0.70, 1.32, 0.00],
    [0.80, 1.31, 0.00], [-0.80, 1.31, 0.00],
])

_BONE_RADII = {1: 0.09, 2: 0.09, 3: 0.11, 4: 0.06, 5: 0.06, 6: 0.11, 7: 0.045,
               8: 0.045, 9: 0.11, 10: 0.04, 11: 0.04, 12: 0.07, 13: 0.06,
               14: 0.06, 15: 0.08, 16: 0.055, 17: 0.055, 18: 0.045, 19: 0.045,
               20: 0.035, 21: 0.035, 22: 0.03, 23: 0.03}


def _ring_basis(axis: np.ndarray):
    ref = np.array([0.0, 0.0, 1.0])
    if abs(axis @ ref) > 0.95:
        ref = np.array([1.0, 0.0, 0.0])
    u = np.cross(axis, ref)
    u /= np.linalg.norm(u)
    w = np.cross(axis, u)
    return u, w


def make_toy_model(joints: int = 24, verts: int = 600, shape_dims: int = 10,
                   seed: int = 0) -> BodyModel:
    """Procedural humanoid (or chain) with tubular vertex rings.

    Deterministic for a given (joints, verts, shape_dims, seed). The
    24-joint variant uses a humanoid tree about 1.7 m tall; other joint
    counts build a vertical chain. With enough vertices the surface is a
    union of closed tubes, one per bone; for very small budgets a
    degenerate but index-valid face list is produced instead.

    Args:
        joints: J >= 2.
        verts: V >= J.
        shape_dims: number of shape directions, >= 1.
        seed: RNG seed for the shape basis.
    """
    if joints < 2:
        raise ValueError("need at least 2 joints")
    if verts < joints:
        raise ValueError("need at least as many vertices as joints")
    if shape_dims < 1:
        raise ValueError("need at least one shape dim")
    rng = np.random.default_rng(seed)

    if joints == 24:
        parents = _HUMANOID_PARENTS.copy()
        jpos = _HUMANOID_JOINTS.copy()
        radii = dict(_BONE_RADII)
    else:
        parents = np.concatenate([[-1], np.arange(joints - 1)]).astype(np.int64)
        ys = np.linspace(0.0, 1.7, joints)
        jpos = np.stack([np.zeros(joints), ys, np.zeros(joints)], axis=1)
        radii = {j: 0.06 for j in range(1, joints)}

    n_bones = joints - 1
    bones = [(int(parents[j]), j) for j in range(1, joints)]
    lengths = np.array([np.linalg.norm(jpos[b] - jpos[a]) for a, b in bones])

    positions: list[np.ndarray] = []
    faces: list[tuple[int, int, int]] = []

    if verts >= 6 * n_bones:
        m = int(min(8, max(3, verts // (2 * n_bones))))
        total_rings = verts // m
        leftover = verts - total_rings * m
        n_rings = np.full(n_bones, 2, dtype=np.int64)
        extra = total_rings - 2 * n_bones
        if extra < 0:
            raise ValueError("vertex budget too small for the bone count")
        share = lengths / lengths.sum() * extra
        n_rings += np.floor(share).astype(np.int64)
        rem = extra - int(np.floor(share).sum())
        order = np.argsort(-(share - np.floor(share)), kind="stable")
        for i in range(rem):
            n_rings[order[i]] += 1

        apex_budget = leftover
        children = {j: [b for a, b in bones if a == j] for j in range(joints)}
        leaf_bones = [i for i, (a, b) in enumerate(bones) if not children[b]]
        apex_bones = set(leaf_bones[:apex_budget])

        for bi, (a, b) in enumerate(bones):
            pa, pb = jpos[a], jpos[b]
            axis = pb - pa
            blen = np.linalg.norm(axis)
            axis = axis / blen
            u, w = _ring_basis(axis)
            rho = radii[b]
            nr = int(n_rings[bi])
            stations = np.linspace(0.12, 0.95, nr)
            ring_ids = []
            for s in stations:
                center = pa + s * blen * axis
                base = len(positions)
                for k in range(m):
                    phi = 2 * np.pi * k / m
                    positions.append(center + rho * (np.cos(phi) * u + np.sin(phi) * w))
                ring_ids.append(base)
            # tube walls
            for r0, r1 in zip(ring_ids[:-1], ring_ids[1:]):
                for k in range(m):
                    k1 = (k + 1) % m
                    faces.append((r0 + k, r1 + k1, r1 + k))
                    faces.append((r0 + k, r0 + k1, r1 + k1))
            # bottom cap, wound against the wall edges so the tube closes
            b0 = ring_ids[0]
            for k in range(1, m - 1):
                faces.append((b0, b0 + k + 1, b0 + k))
            # top cap: cone to an apex point where budget allows, else fan
            ttop = ring_ids[-1]
            if bi in apex_bones:
                apex = len(positions)
                positions.append(pa + min(0.99, 0.95 + rho / blen) * blen * axis
                                 + axis * rho * 0.6)
                for k in range(m):
                    faces.append((ttop + k, ttop + (k + 1) % m, apex))
            else:
                for k in range(1, m - 1):
                    faces.append((ttop, ttop + k, ttop + k + 1))
        # any apex budget not placed (more leftover than leaf bones)
        while len(positions) < verts:
            j = len(positions) % joints
            positions.append(jpos[j] + rng.normal(0, 1e-3, 3))
    else:
        for j in range(joints):
            positions.append(jpos[j].copy())
        k = 0
        while len(positions) < verts:
            a, b = bones[k % n_bones]
            s = 0.25 + 0.5 * ((k // n_bones) % 2)
            positions.append(jpos[a] + s * (jpos[b] - jpos[a]) + np.array([0.02, 0, 0.02]))
            k += 1
        for i in range(verts - 2):
            faces.append((i, i + 1, i + 2))

    template = np.asarray(positions, dtype=np.float64)
    assert template.shape[0] == verts, (template.shape, verts)
    faces_arr = np.asarray(faces, dtype=np.int64)

    # skin weights: falloff over distance to each joint's outgoing bones
    children = {j: [b for p, b in bones if p == j] for j in range(joints)}
    dists = np.zeros((verts, joints))
    for j in range(joints):
        if children[j]:
            dj = np.full(verts, np.inf)
            for c in children[j]:
                dj = np.minimum(dj, _point_segment_dist(template, jpos[j], jpos[c]))
            dists[:, j] = dj
        else:
            dists[:, j] = np.linalg.norm(template - jpos[j], axis=1)
    sigma = 0.07
    wts = np.exp(-((dists / sigma) ** 2))
    keep = np.argsort(-wts, axis=1)[:, :4]
    mask = np.zeros_like(wts)
    np.put_along_axis(mask, keep, 1.0, axis=1)
    wts = wts * mask
    wts = wts / np.maximum(wts.sum(axis=1, keepdims=True), 1e-12)

    # joint regressor: uniform weights over the nearest vertex cluster
    reg = np.zeros((joints, verts))
    k_near = int(min(6, verts))
    for j in range(joints):
        idx = np.argsort(np.linalg.norm(template - jpos[j], axis=1), kind="stable")[:k_near]
        reg[j, idx] = 1.0 / k_near

    # shape basis: one global size mode plus smooth random fields
    basis = np.zeros((verts, 3, shape_dims))
    basis[:, :, 0] = 0.05 * (template - jpos[0])
    for s in range(1, shape_dims):
        field = np.zeros((verts, 3))
        for _ in range(3):
            coef = rng.normal(0.0, 0.008, size=3)
            omega = rng.uniform(0.8, 3.0, size=3)
            phi = rng.uniform(0, 2 * np.pi, size=3)
            field += coef * np.sin(template * omega + phi)
        basis[:, :, s] = field

    return BodyModel(
        template=template.astype(np.float32),
        shape_basis=basis.astype(np.float32),
        joint_regressor=reg.astype(np.float32),
        skin_weights=wts.astype(np.float32),
        parents=parents,
        faces=faces_arr)


def _point_segment_dist(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = max(float(ab @ ab), 1e-12)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1)


def vertex_normals(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals; zero-area fans give zero vectors."""
    verts = np.asarray(verts, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    n = np.zeros_like(verts)
    if faces.size:
        fn = np.cross(verts[faces[:, 1]] - verts[faces[:, 0]],
                      verts[faces[:, 2]] - verts[faces[:, 0]])
        for k in range(3):
            np.add.at(n, faces[:, k], fn)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.maximum(norm, 1e-12)
