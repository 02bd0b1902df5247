"""Tensor archives, synthetic sequence data, and OBJ export.

Archive layout (little-endian throughout):

    magic "HTA1"
    u32   entry count
    per entry:
        u32   name length, then that many utf-8 bytes
        u8    rank
        u32   dims, one per rank axis
        f32   payload, row-major, prod(dims) values

Entry names are unique and order is preserved. Reads fail with the byte
offset of the first inconsistency.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "ArchiveError", "write_archive", "read_archive",
    "SyntheticSequence", "SyntheticDataset", "gen_synthetic_dataset",
    "slice_subsequences", "export_obj_sequence",
    "TRAIN_FAMILIES", "TEST_FAMILIES", "DELTA_BOUND",
]

MAGIC = b"HTA1"


class ArchiveError(ValueError):
    """Malformed archive; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def write_archive(path, entries: dict[str, np.ndarray]) -> None:
    """Write named float32 tensors to ``path``.

    Args:
        entries: name to array; values are cast to float32. Insertion
            order is preserved on disk.
    """
    names = list(entries)
    if len(set(names)) != len(names):
        raise ValueError("duplicate entry names")
    chunks = [MAGIC, struct.pack("<I", len(names))]
    for name in names:
        # asarray, not ascontiguousarray: the latter promotes rank 0 to 1
        arr = np.asarray(entries[name], dtype=np.float32)
        raw = name.encode("utf-8")
        if arr.ndim > 255:
            raise ValueError(f"rank {arr.ndim} exceeds format limit for {name!r}")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4", copy=False).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_archive(path) -> dict[str, np.ndarray]:
    """Read an archive back into an ordered name-to-array dict."""
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise ArchiveError(
                f"truncated archive: needed {n} bytes for {what}, "
                f"have {len(buf) - pos}", pos)
        piece = buf[pos:pos + n]
        pos += n
        return piece

    if take(4, "magic") != MAGIC:
        raise ArchiveError("bad magic, not an HTA1 archive", 0)
    (count,) = struct.unpack("<I", take(4, "entry count"))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        at = pos
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise ArchiveError("entry name is not valid utf-8", at + 4) from None
        if name in out:
            raise ArchiveError(f"duplicate entry name {name!r}", at)
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n_values = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(4 * n_values, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if pos != len(buf):
        raise ArchiveError(f"{len(buf) - pos} trailing bytes after last entry", pos)
    return out


# ---------------------------------------------------------------------------
# synthetic sequences

# joint-angle curve banks; channels are (joint, axis, amp_lo, amp_hi, freq, dphase)
# sides of paired channels run in antiphase via dphase=pi
_GAIT = [
    (1, 0, 0.40, 0.80, 1, 0.0), (2, 0, 0.40, 0.80, 1, np.pi),
    (4, 0, 0.50, 1.00, 1, np.pi / 2), (5, 0, 0.50, 1.00, 1, 3 * np.pi / 2),
    (18, 2, 0.12, 0.30, 1, np.pi), (19, 2, 0.12, 0.30, 1, 0.0),
    (3, 0, 0.04, 0.12, 2, 0.0),
]
_SQUAT = [
    (1, 0, 0.45, 0.90, 1, 0.0), (2, 0, 0.45, 0.90, 1, 0.0),
    (4, 0, 0.80, 1.30, 1, 0.0), (5, 0, 0.80, 1.30, 1, 0.0),
    (6, 0, 0.12, 0.30, 1, np.pi), (7, 0, 0.15, 0.35, 1, 0.0),
    (8, 0, 0.15, 0.35, 1, 0.0),
]
_TWIST = [
    (3, 1, 0.20, 0.50, 1, 0.0), (6, 1, 0.15, 0.40, 1, 0.0),
    (9, 1, 0.10, 0.30, 1, 0.0), (12, 1, 0.15, 0.40, 1, np.pi),
    (16, 0, 0.08, 0.20, 1, 0.0), (17, 0, 0.08, 0.20, 1, np.pi),
    (6, 2, 0.03, 0.08, 1, 0.0),
]
# reach alternates arm side per sequence; side-specific joints filled at draw time
_REACH = [
    ("arm_shoulder", 0, 0.30, 0.70, 1, 0.0), ("arm_shoulder", 2, 0.30, 0.80, 1, 0.0),
    ("arm_elbow", 0, 0.40, 0.90, 1, np.pi / 3), ("arm_wrist", 0, 0.10, 0.30, 1, 0.0),
    (3, 2, 0.08, 0.20, 1, 0.0), ("other_shoulder", 2, 0.08, 0.20, 1, np.pi),
]
_ARM_SWING = [
    (16, 0, 0.30, 0.70, 1, 0.0), (17, 0, 0.30, 0.70, 1, np.pi),
    (18, 0, 0.20, 0.50, 1, 0.0), (19, 0, 0.20, 0.50, 1, np.pi),
    (13, 2, 0.05, 0.15, 1, 0.0), (14, 2, 0.05, 0.15, 1, np.pi),
]
_SIDE_BEND = [
    (3, 2, 0.20, 0.50, 1, 0.0), (6, 2, 0.15, 0.40, 1, 0.0),
    (9, 2, 0.10, 0.30, 1, 0.0), (12, 2, 0.08, 0.25, 1, np.pi),
    (1, 2, 0.05, 0.15, 1, 0.0), (2, 2, 0.05, 0.15, 1, np.pi),
]

TRAIN_FAMILIES = {"gait": _GAIT, "squat": _SQUAT, "twist": _TWIST, "reach": _REACH}
TEST_FAMILIES = {"arm_swing": _ARM_SWING, "side_bend": _SIDE_BEND}
_FAMILY_INDEX = {name: i for i, name in enumerate([*TRAIN_FAMILIES, *TEST_FAMILIES])}

DELTA_BOUND = 3.0  # max |theta_t - theta_1| per axis-angle entry, radians

_ARM_SIDES = {
    "left": {"arm_shoulder": 16, "arm_elbow": 18, "arm_wrist": 20, "other_shoulder": 17},
    "right": {"arm_shoulder": 17, "arm_elbow": 19, "arm_wrist": 21, "other_shoulder": 16},
}


@dataclass
class SyntheticSequence:
    """One generated motion with everything its decode produced."""

    name: str
    family: str
    beta: np.ndarray        # [S]
    pose_seq: np.ndarray    # [L, 72]
    offsets: np.ndarray     # [V, 3] canonical clothing offsets
    verts_body: np.ndarray  # [L, V, 3]
    verts_clothed: np.ndarray  # [L, V, 3]
    joints: np.ndarray      # [L, J, 3]
    points: np.ndarray      # [L, N, 3] surface samples of the clothed mesh

    def save(self, path) -> None:
        write_archive(path, {
            "beta": self.beta, "pose_seq": self.pose_seq, "offsets": self.offsets,
            "verts_body": self.verts_body, "verts_clothed": self.verts_clothed,
            "joints": self.joints, "points": self.points,
            "family": np.float32(_FAMILY_INDEX[self.family]),
        })

    @classmethod
    def load(cls, path) -> "SyntheticSequence":
        e = read_archive(path)
        fam = [k for k, v in _FAMILY_INDEX.items() if v == int(e["family"])][0]
        return cls(name=Path(path).stem, family=fam, beta=e["beta"],
                   pose_seq=e["pose_seq"], offsets=e["offsets"],
                   verts_body=e["verts_body"], verts_clothed=e["verts_clothed"],
                   joints=e["joints"], points=e["points"])


@dataclass
class SyntheticDataset:
    model: "object"  # BodyModel
    train: list[SyntheticSequence]
    test: list[SyntheticSequence]


def _pose_curve(family: str, L: int, rng: np.random.Generator) -> np.ndarray:
    """Sample one [L, 72] axis-angle curve from a family's channel bank."""
    channels = {**TRAIN_FAMILIES, **TEST_FAMILIES}[family]
    side = _ARM_SIDES["left" if rng.random() < 0.5 else "right"]
    theta = np.zeros((L, 72))
    t = np.arange(L) / L
    phase = rng.uniform(0, 2 * np.pi)
    for joint, axis, lo, hi, freq, dphase in channels:
        j = side[joint] if isinstance(joint, str) else joint
        amp = rng.uniform(lo, hi)
        theta[:, 3 * j + axis] += amp * np.sin(2 * np.pi * freq * t + phase + dphase)
    # slow global rotation so the pelvis block is never degenerate
    theta[:, 1] += rng.uniform(0.10, 0.35) * np.sin(2 * np.pi * t + rng.uniform(0, 2 * np.pi))
    theta[:, 0] += rng.uniform(0.03, 0.10) * np.sin(2 * np.pi * t + rng.uniform(0, 2 * np.pi))
    # per-sequence resting posture on the body joints
    base = np.zeros(72)
    base[3:] = np.clip(rng.normal(0.0, 0.05, size=69), -0.15, 0.15)
    theta += base
    delta = np.clip(theta - theta[0], -DELTA_BOUND, DELTA_BOUND)
    return theta[0] + delta


def _smooth_offsets(template: np.ndarray, normals: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    """Low-frequency canonical offset field, a few centimeters at most."""
    V = template.shape[0]
    off = np.zeros((V, 3))
    for _ in range(3):
        coef = rng.normal(0.0, 0.006, size=3)
        omega = rng.uniform(0.8, 3.0, size=3)
        phi = rng.uniform(0, 2 * np.pi, size=3)
        off += coef * np.sin(template * omega + phi)
    off += normals * rng.uniform(0.004, 0.015)
    return off


def gen_synthetic_dataset(preset: str = "desk", seed: int = 0,
                          n_train: int | None = None, n_test: int | None = None,
                          n_points: int | None = None) -> SyntheticDataset:
    """Generate a toy body plus train/test motion corpora.

    Train and test draw from disjoint curve families. Every sequence
    stores the exact decode of its own (beta, pose, offsets), so decode
    reproduction is bit-exact by construction.

    Args:
        preset: "micro", "desk", or "full" size preset.
        seed: RNG seed for the model and all sequences.
        n_train / n_test / n_points: overrides for the preset sizes.
    """
    from . import body_model as bm
    from . import objectives as obj
    from .presets import PRESETS

    p = PRESETS[preset]
    n_train = p.n_train if n_train is None else n_train
    n_test = p.n_test if n_test is None else n_test
    n_points = p.n_points if n_points is None else n_points
    rng = np.random.default_rng(seed)
    model = bm.make_toy_model(joints=p.joints, verts=p.verts, shape_dims=p.shape_dims,
                              seed=seed)
    normals = bm.vertex_normals(model.template, model.faces)

    def make(family: str, idx: int, tag: str) -> SyntheticSequence:
        pose = _pose_curve(family, p.seq_len, rng).astype(np.float32)
        beta = rng.normal(0.0, 1.0, size=p.shape_dims).astype(np.float32)
        offsets = _smooth_offsets(model.template.astype(np.float64), normals, rng)
        offsets = offsets.astype(np.float32)
        body = bm.decode_sequence(model, beta, pose, None)
        clothed = bm.decode_sequence(model, beta, pose, offsets)
        joints = bm.joint_positions(model, beta, pose)
        pts = np.stack([
            obj.sample_surface(clothed[t], model.faces, n_points, rng)
            for t in range(p.seq_len)])
        return SyntheticSequence(name=f"{tag}_{idx:03d}", family=family, beta=beta,
                                 pose_seq=pose, offsets=offsets, verts_body=body,
                                 verts_clothed=clothed, joints=joints,
                                 points=pts.astype(np.float32))

    train_names = list(TRAIN_FAMILIES)
    test_names = list(TEST_FAMILIES)
    train = [make(train_names[i % len(train_names)], i, "train") for i in range(n_train)]
    test = [make(test_names[i % len(test_names)], i, "test") for i in range(n_test)]
    return SyntheticDataset(model=model, train=train, test=test)


def slice_subsequences(pose_seq: np.ndarray, length: int, stride: int) -> list[np.ndarray]:
    """Cut a [T, D] sequence into [length, D] windows at the given stride."""
    T = pose_seq.shape[0]
    if length < 1 or stride < 1:
        raise ValueError("length and stride must be positive")
    if T < length:
        raise ValueError(f"sequence of {T} frames is shorter than window {length}")
    return [pose_seq[s:s + length].copy() for s in range(0, T - length + 1, stride)]


def export_obj_sequence(out_dir, verts_seq: np.ndarray, faces: np.ndarray) -> list[Path]:
    """Write one OBJ per frame as frame_0000.obj, frame_0001.obj, ...

    Vertices are written with 6 decimal places; face indices are 1-based.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    faces = np.asarray(faces, dtype=np.int64)
    paths = []
    for i, verts in enumerate(np.asarray(verts_seq, dtype=np.float64)):
        lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in verts]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in faces]
        path = out_dir / f"frame_{i:04d}.obj"
        path.write_text("\n".join(lines) + "\n")
        paths.append(path)
    return paths
