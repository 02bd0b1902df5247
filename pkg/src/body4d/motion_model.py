"""Linear motion model: PCA over per-frame pose deltas.

A length-L pose sequence is summarized by its first frame plus the
stack of deltas (theta_t - theta_1) for t = 2..L, flattened per frame.
The pelvis (joint 0) block and the remaining body block get separate
PCA bases so global orientation and articulation keep independent
budgets. Components are selected by explained-variance ratio.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

__all__ = [
    "PcaResult", "MotionBasis", "build_delta_matrix", "fit_pca",
    "fit_motion_basis", "lmm_encode", "lmm_decode", "lmm_decode_np",
    "save_basis_entries", "basis_from_entries",
]

POSE_DIM = 72
GLOBAL_DIM = 3


@dataclass(frozen=True)
class PcaResult:
    """Mean, principal directions (columns), and their variances."""

    mean: np.ndarray          # [D]
    components: np.ndarray    # [D, m]
    eigenvalues: np.ndarray   # [m], descending
    m: int
    eigenvalues_all: np.ndarray  # full spectrum, for diagnostics


@dataclass(frozen=True)
class MotionBasis:
    mean_global: np.ndarray   # [3*(L-1)]
    comps_global: np.ndarray  # [3*(L-1), K_g]
    eig_global: np.ndarray    # [K_g]
    mean_body: np.ndarray     # [69*(L-1)]
    comps_body: np.ndarray    # [69*(L-1), K_b]
    eig_body: np.ndarray      # [K_b]
    seq_len: int

    @property
    def k_global(self) -> int:
        return self.comps_global.shape[1]

    @property
    def k_body(self) -> int:
        return self.comps_body.shape[1]

    @property
    def motion_dims(self) -> int:
        return self.k_global + self.k_body


def build_delta_matrix(pose_seqs) -> tuple[np.ndarray, np.ndarray]:
    """Flattened per-frame deltas, split into pelvis and body blocks.

    Args:
        pose_seqs: [N, L, 72] axis-angle sequences.

    Returns:
        (global_rows [N, 3*(L-1)], body_rows [N, 69*(L-1)]); row i holds
        seq i's deltas against its first frame, frame-major.
    """
    seqs = np.asarray(pose_seqs, dtype=np.float64)
    if seqs.ndim != 3 or seqs.shape[2] != POSE_DIM:
        raise ValueError(f"expected [N, L, {POSE_DIM}], got {seqs.shape}")
    if seqs.shape[1] < 2:
        raise ValueError("sequences need at least 2 frames")
    delta = seqs[:, 1:, :] - seqs[:, :1, :]
    n = seqs.shape[0]
    return (delta[:, :, :GLOBAL_DIM].reshape(n, -1),
            delta[:, :, GLOBAL_DIM:].reshape(n, -1))


def fit_pca(rows: np.ndarray, q_target: float) -> PcaResult:
    """PCA with an explained-variance component selector.

    Args:
        rows: [N, D] samples.
        q_target: keep the smallest m whose variance ratio exceeds this;
            1.0 keeps every component above numerical rank tolerance.

    Eigenvalues use the 1/(N-1) covariance convention. Each component's
    largest-magnitude entry is flipped positive so signs are stable.
    """
    if not (0.0 < q_target <= 1.0):
        raise ValueError(f"q_target must be in (0, 1], got {q_target}")
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ValueError(f"rows must be [N, D], got {rows.shape}")
    n, d = rows.shape
    mean = rows.mean(axis=0)
    centered = rows - mean
    if n == 1:
        return PcaResult(mean, np.zeros((d, 0)), np.zeros(0), 0, np.zeros(0))
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    eig = (s * s) / (n - 1)
    total = eig.sum()
    if total <= 1e-12:
        return PcaResult(mean, np.zeros((d, 0)), np.zeros(0), 0, eig)
    if q_target >= 1.0:
        m = int(np.sum(eig > eig[0] * 1e-10))
    else:
        ratio = np.cumsum(eig) / total
        m = int(np.searchsorted(ratio, q_target, side="right") + 1)
        m = min(m, eig.size)
    comps = vt[:m].T.copy()
    for k in range(m):
        i = int(np.argmax(np.abs(comps[:, k])))
        if comps[i, k] < 0:
            comps[:, k] = -comps[:, k]
    return PcaResult(mean, comps, eig[:m].copy(), m, eig)


def fit_motion_basis(pose_seqs, q_target: float = 0.9) -> MotionBasis:
    """Fit pelvis and body PCA blocks from training sequences."""
    g_rows, b_rows = build_delta_matrix(pose_seqs)
    pg = fit_pca(g_rows, q_target)
    pb = fit_pca(b_rows, q_target)
    L = np.asarray(pose_seqs).shape[1]
    return MotionBasis(mean_global=pg.mean, comps_global=pg.components,
                       eig_global=pg.eigenvalues, mean_body=pb.mean,
                       comps_body=pb.components, eig_body=pb.eigenvalues,
                       seq_len=int(L))


def lmm_encode(basis: MotionBasis, pose_seq: np.ndarray,
               whiten: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Project a pose sequence onto the basis.

    Returns:
        (c_p [72], alpha [K_g + K_b]): first-frame pose and the stacked
        pelvis/body projection coefficients.
    """
    seq = np.asarray(pose_seq, dtype=np.float64)
    if seq.shape != (basis.seq_len, POSE_DIM):
        raise ValueError(f"expected [{basis.seq_len}, {POSE_DIM}], got {seq.shape}")
    g_rows, b_rows = build_delta_matrix(seq[None])
    a_g = basis.comps_global.T @ (g_rows[0] - basis.mean_global)
    a_b = basis.comps_body.T @ (b_rows[0] - basis.mean_body)
    if whiten:
        a_g = a_g / np.sqrt(np.maximum(basis.eig_global, 1e-12))
        a_b = a_b / np.sqrt(np.maximum(basis.eig_body, 1e-12))
    return seq[0].copy(), np.concatenate([a_g, a_b])


def lmm_decode(basis: MotionBasis, c_p, c_m, whiten: bool = False) -> Tensor:
    """Reconstruct an [L, 72] pose sequence from codes (tape-recorded).

    Frame 0 is c_p; later frames add the mean delta plus the component
    combination given by c_m.
    """
    L = basis.seq_len
    c_p = tc.as_tensor(c_p)
    c_m = tc.as_tensor(c_m)
    if c_p.shape != (POSE_DIM,):
        raise tc.ShapeMismatch(f"c_p must be [{POSE_DIM}], got {c_p.shape}")
    kg, kb = basis.k_global, basis.k_body
    if c_m.shape != (kg + kb,):
        raise tc.ShapeMismatch(f"c_m must be [{kg + kb}], got {c_m.shape}")

    def block(mean, comps, eig, alpha, width):
        mean_t = tc.as_tensor(mean.astype(np.float32))
        if comps.shape[1] == 0:
            return tc.reshape(mean_t, (L - 1, width))
        if whiten:
            comps = comps * np.sqrt(np.maximum(eig, 1e-12))
        delta = tc.matmul(tc.as_tensor(comps.astype(np.float32)), alpha)
        return tc.reshape(mean_t + delta, (L - 1, width))

    a_g = tc.narrow(c_m, 0, 0, kg) if kg else None
    a_b = tc.narrow(c_m, 0, kg, kb) if kb else None
    dg = block(basis.mean_global, basis.comps_global, basis.eig_global, a_g, GLOBAL_DIM)
    db = block(basis.mean_body, basis.comps_body, basis.eig_body, a_b,
               POSE_DIM - GLOBAL_DIM)
    delta = tc.concat([dg, db], axis=1)                 # [L-1, 72]
    first = tc.reshape(c_p, (1, POSE_DIM))
    return tc.concat([first, first + delta], axis=0)


def lmm_decode_np(basis: MotionBasis, c_p: np.ndarray, c_m: np.ndarray,
                  whiten: bool = False) -> np.ndarray:
    with tc.no_grad():
        return lmm_decode(basis, np.asarray(c_p, np.float32),
                          np.asarray(c_m, np.float32), whiten).data


def save_basis_entries(basis: MotionBasis) -> dict[str, np.ndarray]:
    """Archive entries under the lmm.* namespace."""
    return {
        "lmm.mean_global": basis.mean_global, "lmm.comps_global": basis.comps_global,
        "lmm.eig_global": basis.eig_global, "lmm.mean_body": basis.mean_body,
        "lmm.comps_body": basis.comps_body, "lmm.eig_body": basis.eig_body,
        "lmm.L": np.float32(basis.seq_len),
    }


def basis_from_entries(entries: dict[str, np.ndarray]) -> MotionBasis:
    L = int(entries["lmm.L"])
    b = MotionBasis(
        mean_global=entries["lmm.mean_global"], comps_global=entries["lmm.comps_global"],
        eig_global=entries["lmm.eig_global"], mean_body=entries["lmm.mean_body"],
        comps_body=entries["lmm.comps_body"], eig_body=entries["lmm.eig_body"],
        seq_len=L)
    if b.mean_global.shape != (GLOBAL_DIM * (L - 1),):
        raise ValueError("basis entries inconsistent with stored length")
    return b
