"""Training, reconstruction, retargeting, and auto-decoding fits.

Everything downstream of the encoders funnels through ``decode_codes``,
so reconstruction, retargeting, and fitting all pose meshes with the
same tape operations; retargeting a sequence onto itself is bit for bit
a reconstruction.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensorcore as tc
from .body_model import BodyModel, SkinResult, skin_sequence
from .motion_model import MotionBasis, lmm_decode
from .networks import (NetConfig, config_entries, config_from_entries,
                       init_weights, motion_comp, shape_comp, spatial_encode,
                       temporal_encode)
from .objectives import (PRIOR_WEIGHTS, chamfer_fit_loss, keypoint_fit_loss,
                         p2s_fit_loss, prior_terms, sample_surface_info,
                         total_loss, vertex_l1)
from .tensorcore import Tensor, adam_init, adam_update

__all__ = [
    "TrainConfig", "FitConfig", "Checkpoint", "Codes", "DecodeResult",
    "FitResult", "TrainingDiverged", "encode_sequence", "decode_codes",
    "reconstruct", "retarget", "train", "autodecode_fit",
    "complete_temporal", "complete_spatial", "predict_future", "orbit_keep_masks",
    "save_checkpoint", "load_checkpoint",
]

FIT_LOSSES = ("chamfer", "p2s", "vertex_l1", "keypoint")


class TrainingDiverged(RuntimeError):
    """Loss or gradients went non-finite; training cannot continue."""


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    iterations: int = 1000
    lr: float = 1e-4
    lr_drop_at: int = 200_000
    lr_after_drop: float = 1e-5
    batch: int | None = None      # per-stage default when None
    seed: int = 0
    threads: int = 1

    def resolved_batch(self) -> int:
        if self.batch is not None:
            return self.batch
        return 16 if self.stage == 1 else 4


@dataclass(frozen=True)
class FitConfig:
    loss: str = "chamfer"         # one of FIT_LOSSES
    iterations: int = 500
    lr: float = 3e-2
    n_sample: int = 8192
    init_var: float = 0.01        # variance of the initial code noise
    prior_weights: tuple[float, float, float] = PRIOR_WEIGHTS
    seed: int = 0
    fit_translation: bool = False
    resample_each_iter: bool = False
    safeguard: bool = True


@dataclass
class Checkpoint:
    cfg: NetConfig
    params: dict[str, Tensor]
    basis: MotionBasis


@dataclass(frozen=True)
class Codes:
    c_s: np.ndarray
    c_p: np.ndarray
    c_m: np.ndarray
    c_a: np.ndarray


@dataclass
class DecodeResult:
    poses_linear: Tensor
    poses: Tensor
    offsets: Tensor | None
    body: SkinResult | None
    clothed: SkinResult | None

    @property
    def joints(self) -> Tensor:
        src = self.clothed if self.clothed is not None else self.body
        return src.joints


# ---------------------------------------------------------------------------
# encode / decode

def encode_sequence(ckpt: Checkpoint, points) -> Codes:
    """Run all encoders on an [L, N, 3] point-cloud sequence (no tape)."""
    pts = np.asarray(points, dtype=np.float32)
    with tc.no_grad():
        c_s = spatial_encode(pts[0], ckpt.params, "enc.shape", ckpt.cfg)
        c_p = spatial_encode(pts[0], ckpt.params, "enc.pose", ckpt.cfg)
        c_m, c_a = temporal_encode(pts, ckpt.params, ckpt.cfg)
    return Codes(c_s=c_s.data.copy(), c_p=c_p.data.copy(),
                 c_m=c_m.data.copy(), c_a=c_a.data.copy())


def decode_codes(model: BodyModel, ckpt: Checkpoint, c_s, c_p, c_m,
                 c_a_motion=None, c_a_shape=None, apply_comp: bool = True,
                 translation=None, want_body: bool = True,
                 want_clothed: bool = True) -> DecodeResult:
    """Codes to meshes; the single decode path used everywhere.

    Args:
        c_a_motion: auxiliary code fed to motion compensation.
        c_a_shape: auxiliary code fed to the clothing network (equal to
            c_a_motion for reconstruction; they differ when retargeting).
        apply_comp: run the compensation networks (a stage-1 style
            decode uses False).
        translation: optional [L, 3] root translation.

    Returns:
        DecodeResult of tape tensors; gradients flow to the code inputs
        and network weights.
    """
    poses_linear = lmm_decode(ckpt.basis, tc.as_tensor(c_p), tc.as_tensor(c_m))
    if apply_comp:
        poses = motion_comp(poses_linear, c_m, c_a_motion, ckpt.params, ckpt.cfg)
        offsets = shape_comp(c_a_shape, poses, ckpt.params, ckpt.cfg)
    else:
        poses, offsets = poses_linear, None
    body = None
    if want_body or offsets is None:
        body = skin_sequence(model, c_s, poses, None, translation)
    clothed = None
    if want_clothed and offsets is not None:
        clothed = skin_sequence(model, c_s, poses, offsets, translation)
    return DecodeResult(poses_linear=poses_linear, poses=poses,
                        offsets=offsets, body=body, clothed=clothed)


@dataclass
class Reconstruction:
    codes: Codes
    poses_linear: np.ndarray     # [L, 72]
    poses: np.ndarray            # [L, 72]
    offsets: np.ndarray          # [L, V, 3], zeros when comp is off
    verts_body: np.ndarray       # [L, V, 3]
    verts_clothed: np.ndarray    # [L, V, 3]
    joints: np.ndarray           # [L, J, 3]


def _materialize(dec: DecodeResult, codes: Codes) -> Reconstruction:
    body = dec.body.verts.data
    clothed = dec.clothed.verts.data if dec.clothed is not None else body
    if dec.offsets is not None:
        off = dec.offsets.data
    else:
        off = np.zeros_like(body)
    return Reconstruction(codes=codes, poses_linear=dec.poses_linear.data,
                          poses=dec.poses.data, offsets=off, verts_body=body,
                          verts_clothed=clothed, joints=dec.joints.data)


def reconstruct(model: BodyModel, ckpt: Checkpoint, points,
                apply_comp: bool = True) -> Reconstruction:
    """Encode a point-cloud sequence and decode it back to meshes."""
    codes = encode_sequence(ckpt, points)
    with tc.no_grad():
        dec = decode_codes(model, ckpt, codes.c_s, codes.c_p, codes.c_m,
                           codes.c_a, codes.c_a, apply_comp=apply_comp)
    return _materialize(dec, codes)


def retarget(model: BodyModel, ckpt: Checkpoint, identity_points,
             motion_points, apply_comp: bool = True) -> Reconstruction:
    """Drive one subject's shape with another sequence's motion.

    Shape code and the clothing network's auxiliary code come from the
    identity sequence; pose, motion, and the motion-compensation
    auxiliary code come from the motion sequence.
    """
    ident = encode_sequence(ckpt, identity_points)
    motion = encode_sequence(ckpt, motion_points)
    mixed = Codes(c_s=ident.c_s, c_p=motion.c_p, c_m=motion.c_m, c_a=motion.c_a)
    with tc.no_grad():
        dec = decode_codes(model, ckpt, ident.c_s, motion.c_p, motion.c_m,
                           motion.c_a, ident.c_a, apply_comp=apply_comp)
    return _materialize(dec, mixed)


# ---------------------------------------------------------------------------
# training

def _training_loss(model: BodyModel, ckpt: Checkpoint, item, stage: int) -> Tensor:
    pts = item.points
    cfg = ckpt.cfg
    c_s = spatial_encode(pts[0], ckpt.params, "enc.shape", cfg)
    c_p = spatial_encode(pts[0], ckpt.params, "enc.pose", cfg)
    c_m, c_a = temporal_encode(pts, ckpt.params, cfg)
    dec = decode_codes(model, ckpt, c_s, c_p, c_m, c_a, c_a,
                       apply_comp=(stage == 2), want_clothed=False)
    targets = {"c_s_star": item.beta, "Y_body": item.verts_body}
    if stage == 1:
        outputs = {"c_s": c_s, "X_linear": dec.body.verts}
    else:
        outputs = {"c_s": c_s, "X_motion": dec.body.verts, "X_shape": dec.offsets}
        targets["Y_offset"] = np.broadcast_to(
            np.asarray(item.offsets, np.float32)[None], dec.offsets.shape)
    return total_loss(stage, outputs, targets)


def train(model: BodyModel, ckpt: Checkpoint, dataset, cfg: TrainConfig,
          log_fn=None) -> list[float]:
    """Optimize all checkpoint weights in place; returns the loss curve.

    Stage 1 trains through the basis decode only; compensation weights
    receive exactly zero gradient there and keep their initialization.

    Raises:
        TrainingDiverged: non-finite loss or gradient.
    """
    if cfg.stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {cfg.stage}")
    if not dataset:
        raise ValueError("empty training dataset")
    names = sorted(ckpt.params)
    var_list = [ckpt.params[n] for n in names]
    state = adam_init(ckpt.params, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    batch = cfg.resolved_batch()
    history: list[float] = []

    def one(i: int):
        loss = _training_loss(model, ckpt, dataset[i], cfg.stage)
        return float(loss.data), tc.backward(loss, var_list)

    pool = None
    if cfg.threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        pool = ThreadPoolExecutor(max_workers=cfg.threads)
    try:
        for step in range(cfg.iterations):
            state.lr = cfg.lr if step < cfg.lr_drop_at else cfg.lr_after_drop
            idx = rng.integers(0, len(dataset), size=batch)
            if pool is not None:
                results = list(pool.map(one, idx))
            else:
                results = [one(i) for i in idx]
            # fixed-order accumulation keeps multi-thread runs bit-stable
            total = {n: np.zeros_like(ckpt.params[n].data, dtype=np.float64)
                     for n in names}
            loss_val = 0.0
            for item_loss, grads in results:
                loss_val += item_loss
                for n, g in zip(names, grads):
                    total[n] += g
            loss_val /= batch
            if not np.isfinite(loss_val):
                raise TrainingDiverged(f"non-finite loss at step {step}")
            grads = {n: (total[n] / batch).astype(np.float32) for n in names}
            try:
                adam_update(ckpt.params, grads, state)
            except FloatingPointError as e:
                raise TrainingDiverged(f"step {step}: {e}") from None
            history.append(loss_val)
            if log_fn is not None:
                log_fn(step, loss_val, state.lr)
    finally:
        if pool is not None:
            pool.shutdown()
    return history


# ---------------------------------------------------------------------------
# auto-decoding fits

@dataclass
class FitResult:
    codes: dict[str, np.ndarray]
    loss_history: list[float]
    final_loss: float
    observed_mask: np.ndarray
    recon: Reconstruction


def _as_frame_list(observations, L: int | None = None) -> list[np.ndarray]:
    if isinstance(observations, np.ndarray) and observations.ndim == 3:
        frames = [observations[t] for t in range(observations.shape[0])]
    else:
        frames = [np.asarray(f, dtype=np.float32).reshape(-1, 3)
                  for f in observations]
    if L is not None and len(frames) != L:
        raise ValueError(f"expected {L} frames, got {len(frames)}")
    return [np.asarray(f, dtype=np.float32) for f in frames]


def autodecode_fit(model: BodyModel, ckpt: Checkpoint, observations,
                   cfg: FitConfig, frame_mask=None) -> FitResult:
    """Fit latent codes to observations by gradient descent.

    The decoder weights stay frozen; only the codes (and optionally a
    per-frame root translation) move. Codes start from small Gaussian
    noise. With the safeguard on, an iteration whose loss exceeds the
    best seen so far is rolled back and the learning rate halved, so the
    recorded loss history is nonincreasing. The best-loss codes are
    returned.

    Args:
        observations: per-frame point clouds (chamfer/p2s), [L, V, 3]
            vertices (vertex_l1), or [L, J, 3] joints (keypoint).
        frame_mask: optional [L] bool; False frames contribute no data
            term. Frames with zero observed points are masked
            automatically. All frames masked out is an error.
    """
    if cfg.loss not in FIT_LOSSES:
        raise ValueError(f"unknown fit loss {cfg.loss!r}; pick from {FIT_LOSSES}")
    L = ckpt.basis.seq_len
    net = ckpt.cfg
    if cfg.loss in ("chamfer", "p2s"):
        frames = _as_frame_list(observations, L)
        dense = None
    else:
        dense = np.asarray(observations, dtype=np.float32)
        want = (L, net.verts, 3) if cfg.loss == "vertex_l1" else (L, net.joints, 3)
        if dense.shape != want:
            raise ValueError(f"{cfg.loss} observations must be {want}, got {dense.shape}")
        frames = None

    mask = np.ones(L, dtype=bool) if frame_mask is None else \
        np.asarray(frame_mask, dtype=bool).copy()
    if mask.shape != (L,):
        raise ValueError(f"frame_mask must be [{L}], got {mask.shape}")
    if frames is not None:
        for t in range(L):
            if frames[t].shape[0] == 0:
                mask[t] = False
    observed = np.nonzero(mask)[0]
    if observed.size == 0:
        raise ValueError("every frame is masked out; nothing to fit")

    rng = np.random.default_rng(cfg.seed)
    std = float(np.sqrt(cfg.init_var))
    K = ckpt.basis.k_global + ckpt.basis.k_body

    def init(n):
        return tc.parameter(rng.normal(0.0, std, size=n).astype(np.float32))

    codes: dict[str, Tensor] = {
        "c_s": init(net.shape_dims), "c_p": init(net.pose_dims),
        "c_m": init(K), "c_a": init(net.aux_dims),
    }
    if cfg.fit_translation:
        codes["trans"] = tc.parameter(np.zeros((L, 3), np.float32))

    # fixed surface sampling pattern drawn from template areas, one draw
    # per observed frame; optionally redrawn every iteration
    def draw_patterns():
        pats = {}
        for t in observed:
            _, tri, bary = sample_surface_info(model.template, model.faces,
                                               cfg.n_sample, rng)
            pats[int(t)] = (tri, bary.astype(np.float32))
        return pats

    patterns = draw_patterns() if cfg.loss == "chamfer" else None
    faces = model.faces
    V = net.verts

    def frame_verts(dec: DecodeResult, t: int) -> Tensor:
        return tc.reshape(tc.narrow(dec.clothed.verts, 0, t, 1), (V, 3))

    def evaluate():
        trans = codes.get("trans")
        dec = decode_codes(model, ckpt, codes["c_s"], codes["c_p"], codes["c_m"],
                           codes["c_a"], codes["c_a"], apply_comp=True,
                           translation=trans, want_body=False)
        terms = []
        if cfg.loss == "chamfer":
            for t in observed:
                tri, bary = patterns[int(t)]
                vt = frame_verts(dec, int(t))
                corners = [tc.gather(vt, faces[tri, k]) for k in range(3)]
                pred = (tc.as_tensor(bary[:, 0:1]) * corners[0]
                        + tc.as_tensor(bary[:, 1:2]) * corners[1]
                        + tc.as_tensor(bary[:, 2:3]) * corners[2])
                terms.append(chamfer_fit_loss(pred, frames[t]))
        elif cfg.loss == "p2s":
            for t in observed:
                terms.append(p2s_fit_loss(frames[t], frame_verts(dec, int(t)), faces))
        elif cfg.loss == "vertex_l1":
            sel = tc.gather(dec.clothed.verts, observed)
            terms.append(vertex_l1(sel, dense[observed]))
        else:
            sel = tc.gather(dec.clothed.joints, observed)
            terms.append(keypoint_fit_loss(sel, dense[observed]))
        data = terms[0] if len(terms) == 1 else sum(terms) * (1.0 / len(terms))
        prior = prior_terms(codes["c_s"], codes["c_m"], codes["c_a"],
                            ckpt.basis, cfg.prior_weights)
        return data + prior, dec

    state = adam_init(codes, cfg.lr)
    best_loss = np.inf
    best = {k: v.data.copy() for k, v in codes.items()}
    history: list[float] = []
    for _ in range(cfg.iterations):
        if cfg.resample_each_iter and cfg.loss == "chamfer":
            patterns = draw_patterns()
        loss, _ = evaluate()
        val = float(loss.data)
        if not np.isfinite(val):
            raise TrainingDiverged("non-finite fit loss")
        if cfg.safeguard and val > best_loss:
            for k, v in codes.items():
                v.data[...] = best[k]
            state.lr *= 0.5
            history.append(best_loss)
            continue
        if val < best_loss:
            best_loss = val
            best = {k: v.data.copy() for k, v in codes.items()}
        history.append(val)
        grads = dict(zip(codes, tc.backward(loss, list(codes.values()))))
        try:
            adam_update(codes, grads, state)
        except FloatingPointError as e:
            raise TrainingDiverged(str(e)) from None

    for k, v in codes.items():
        v.data[...] = best[k]
    final_loss, _ = evaluate()
    with tc.no_grad():
        dec = decode_codes(model, ckpt, codes["c_s"].data, codes["c_p"].data,
                           codes["c_m"].data, codes["c_a"].data, codes["c_a"].data,
                           apply_comp=True, translation=codes.get("trans"))
    code_values = {k: v.data.copy() for k, v in codes.items()}
    recon = _materialize(dec, Codes(c_s=code_values["c_s"], c_p=code_values["c_p"],
                                    c_m=code_values["c_m"], c_a=code_values["c_a"]))
    return FitResult(codes=code_values, loss_history=history,
                     final_loss=float(final_loss.data), observed_mask=mask,
                     recon=recon)


# ---------------------------------------------------------------------------
# applications

def complete_temporal(model: BodyModel, ckpt: Checkpoint, observations,
                      observed_mask, cfg: FitConfig | None = None) -> FitResult:
    """Fill unobserved frames by fitting codes to the observed ones."""
    cfg = cfg or FitConfig()
    return autodecode_fit(model, ckpt, observations, cfg, frame_mask=observed_mask)


def orbit_keep_masks(points_seq, revolutions: float = 1.0) -> list[np.ndarray]:
    """Half-space visibility for a camera orbiting the sequence.

    Frame t keeps points on the half of the cloud facing a direction
    that sweeps ``revolutions`` full turns around the vertical axis over
    the sequence. Masks are per-point booleans.
    """
    frames = _as_frame_list(points_seq)
    center = np.concatenate(frames).mean(axis=0) if frames else np.zeros(3)
    L = len(frames)
    masks = []
    for t, pts in enumerate(frames):
        phi = 2.0 * np.pi * revolutions * t / max(L, 1)
        d = np.array([np.cos(phi), 0.0, np.sin(phi)])
        masks.append((pts - center) @ d > 0.0)
    return masks


def complete_spatial(model: BodyModel, ckpt: Checkpoint, points_seq,
                     cfg: FitConfig | None = None, orbit: bool = True,
                     revolutions: float = 1.0) -> FitResult:
    """Fit to partial views: each frame sees only the half-space facing
    an orbiting direction, and the loss pulls observations onto the
    surface one-directionally. Frames left with no points are masked."""
    cfg = replace(cfg or FitConfig(), loss="p2s")
    frames = _as_frame_list(points_seq)
    if orbit:
        keeps = orbit_keep_masks(frames, revolutions)
        frames = [f[k] for f, k in zip(frames, keeps)]
    return autodecode_fit(model, ckpt, frames, cfg)


def predict_future(model: BodyModel, ckpt: Checkpoint, observations,
                   n_observed: int, cfg: FitConfig | None = None) -> FitResult:
    """Fit codes to a prefix of the sequence; the decode extends to all
    frames, so the tail of the result is the prediction."""
    cfg = cfg or FitConfig()
    L = ckpt.basis.seq_len
    if not 0 < n_observed <= L:
        raise ValueError(f"n_observed must be in 1..{L}, got {n_observed}")
    mask = np.zeros(L, dtype=bool)
    mask[:n_observed] = True
    return autodecode_fit(model, ckpt, observations, cfg, frame_mask=mask)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, ckpt: Checkpoint) -> None:
    from .dataio import write_archive
    from .motion_model import save_basis_entries
    entries: dict[str, np.ndarray] = {}
    entries.update(config_entries(ckpt.cfg))
    entries.update(save_basis_entries(ckpt.basis))
    for name, p in ckpt.params.items():
        entries[name] = p.data
    write_archive(path, entries)


def load_checkpoint(path) -> Checkpoint:
    from .dataio import read_archive
    from .motion_model import basis_from_entries
    entries = read_archive(path)
    cfg = config_from_entries(entries)
    basis = basis_from_entries(entries)
    params = {name: tc.parameter(arr, name) for name, arr in entries.items()
              if not name.startswith(("config.", "lmm."))}
    missing = set(init_weights(cfg, seed=0)) - set(params)
    if missing:
        raise ValueError(f"checkpoint missing parameters: {sorted(missing)[:5]}")
    return Checkpoint(cfg=cfg, params=params, basis=basis)
