"""Point-cloud encoders and recurrent compensation networks.

Weights live in a flat name-to-tensor dict using the archive namespaces
(enc.shape, enc.pose, enc.feat, enc.gru_m, enc.gru_a, comp.motion,
comp.shape), so a checkpoint is just the dict written to an archive.

The two compensation networks have zero-initialized output heads: at
initialization motion compensation is the identity on poses and the
clothing offsets are exactly zero, so a freshly initialized stage-2
forward pass reproduces the stage-1 decode bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .body_model import rodrigues
from .presets import Preset
from .tensorcore import GateWeights, Tensor

__all__ = [
    "NetConfig", "default_clothing_joints", "init_weights", "param_count",
    "spatial_encode", "temporal_encode", "motion_comp", "shape_comp",
    "gate_weights", "config_entries", "config_from_entries",
]


@dataclass(frozen=True)
class NetConfig:
    """Dimensions shared by every network in one model instance."""

    joints: int
    verts: int
    shape_dims: int
    motion_dims: int
    aux_dims: int
    seq_len: int
    spatial_widths: tuple[int, ...]
    feat_hidden: int
    gru_hidden: int
    gru_layers: int
    shape_latent: int
    vertex_embed: int
    clothing_joints: tuple[int, ...]
    pose_dims: int = 72

    @classmethod
    def from_preset(cls, preset: Preset, motion_dims: int,
                    clothing_joints: tuple[int, ...]) -> "NetConfig":
        return cls(joints=preset.joints, verts=preset.verts,
                   shape_dims=preset.shape_dims, motion_dims=motion_dims,
                   aux_dims=preset.aux_dims, seq_len=preset.seq_len,
                   spatial_widths=tuple(preset.spatial_widths),
                   feat_hidden=preset.feat_hidden, gru_hidden=preset.gru_hidden,
                   gru_layers=preset.gru_layers, shape_latent=preset.shape_latent,
                   vertex_embed=preset.vertex_embed,
                   clothing_joints=clothing_joints)


def default_clothing_joints(parents: np.ndarray) -> tuple[int, ...]:
    """Joints that condition the clothing network: every non-leaf joint.

    On the humanoid tree this drops exactly the hands, feet, and head
    tip, whose rotations say nothing about garment state.
    """
    parents = np.asarray(parents)
    has_child = np.zeros(parents.shape[0], dtype=bool)
    has_child[parents[parents >= 0]] = True
    return tuple(int(j) for j in np.nonzero(has_child)[0])


# ---------------------------------------------------------------------------
# initialization

def _kaiming(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)


def _add_linear(store, rng, name: str, fan_in: int, fan_out: int, zero: bool = False):
    if zero:
        w = np.zeros((fan_in, fan_out), dtype=np.float32)
    else:
        w = _kaiming(rng, fan_in, fan_out)
    store[f"{name}.w"] = tc.parameter(w, f"{name}.w")
    store[f"{name}.b"] = tc.parameter(np.zeros(fan_out, dtype=np.float32), f"{name}.b")


def _add_gru_stack(store, rng, prefix: str, d_in: int, d_h: int, layers: int):
    for i in range(layers):
        fan = d_in if i == 0 else d_h
        bound = 1.0 / np.sqrt(d_h)

        def u(*shape):
            return tc.parameter(
                rng.uniform(-bound, bound, size=shape).astype(np.float32))

        store[f"{prefix}.l{i}.w_ih"] = u(fan, 3 * d_h)
        store[f"{prefix}.l{i}.w_hh"] = u(d_h, 3 * d_h)
        store[f"{prefix}.l{i}.b_ih"] = u(3 * d_h)
        store[f"{prefix}.l{i}.b_hh"] = u(3 * d_h)


def _add_spatial(store, rng, prefix: str, widths, out_dim: int):
    w0 = widths[0]
    _add_linear(store, rng, f"{prefix}.lift", 3, 2 * w0)
    d_in = 2 * w0
    for i, w in enumerate(widths):
        _add_linear(store, rng, f"{prefix}.block{i}.fc0", d_in, w)
        _add_linear(store, rng, f"{prefix}.block{i}.fc1", w, w)
        if d_in != w:
            store[f"{prefix}.block{i}.skip.w"] = tc.parameter(
                _kaiming(rng, d_in, w), f"{prefix}.block{i}.skip.w")
        d_in = 2 * w  # pooled features are concatenated back per point
    _add_linear(store, rng, f"{prefix}.head", widths[-1], out_dim)


def init_weights(cfg: NetConfig, seed: int = 0) -> dict[str, Tensor]:
    """Fresh parameter dict for every network in the composition."""
    rng = np.random.default_rng(seed)
    store: dict[str, Tensor] = {}
    _add_spatial(store, rng, "enc.shape", cfg.spatial_widths, cfg.shape_dims)
    _add_spatial(store, rng, "enc.pose", cfg.spatial_widths, cfg.pose_dims)
    h = cfg.feat_hidden
    _add_linear(store, rng, "enc.feat.l0", 3, h)
    _add_linear(store, rng, "enc.feat.l1", 2 * h, h)
    _add_linear(store, rng, "enc.feat.l2", 2 * h, h)
    _add_gru_stack(store, rng, "enc.gru_m", h, cfg.gru_hidden, cfg.gru_layers)
    _add_linear(store, rng, "enc.gru_m.head", cfg.gru_hidden, cfg.motion_dims)
    _add_gru_stack(store, rng, "enc.gru_a", h, cfg.gru_hidden, cfg.gru_layers)
    _add_linear(store, rng, "enc.gru_a.head", cfg.gru_hidden, cfg.aux_dims)

    d_mc = cfg.pose_dims + cfg.motion_dims + cfg.aux_dims
    _add_gru_stack(store, rng, "comp.motion", d_mc, cfg.gru_hidden, cfg.gru_layers)
    _add_linear(store, rng, "comp.motion.head", cfg.gru_hidden, cfg.pose_dims, zero=True)

    d_sc = cfg.aux_dims + 9 * len(cfg.clothing_joints)
    _add_gru_stack(store, rng, "comp.shape", d_sc, cfg.gru_hidden, cfg.gru_layers)
    _add_linear(store, rng, "comp.shape.latent", cfg.gru_hidden, cfg.shape_latent)
    store["comp.shape.embed"] = tc.parameter(
        rng.uniform(-0.1, 0.1, size=(cfg.verts, cfg.vertex_embed)).astype(np.float32),
        "comp.shape.embed")
    _add_linear(store, rng, "comp.shape.dec.fc0",
                cfg.shape_latent + cfg.vertex_embed, 2 * cfg.shape_latent)
    _add_linear(store, rng, "comp.shape.dec.out", 2 * cfg.shape_latent, 3, zero=True)
    return store


def param_count(store: dict[str, Tensor]) -> int:
    return int(sum(p.data.size for p in store.values()))


def gate_weights(store: dict[str, Tensor], prefix: str, layers: int) -> list[GateWeights]:
    return [GateWeights(w_ih=store[f"{prefix}.l{i}.w_ih"],
                        w_hh=store[f"{prefix}.l{i}.w_hh"],
                        b_ih=store[f"{prefix}.l{i}.b_ih"],
                        b_hh=store[f"{prefix}.l{i}.b_hh"]) for i in range(layers)]


# ---------------------------------------------------------------------------
# forward passes

def _linear(store, name: str, x: Tensor) -> Tensor:
    return tc.matmul(x, store[f"{name}.w"]) + store[f"{name}.b"]


def _pool_concat(x: Tensor) -> Tensor:
    """Append the per-feature max over points to every point."""
    n = x.shape[0]
    pooled = tc.reshape(tc.tmax(x, axis=0), (1, x.shape[1]))
    tiled = tc.mul(tc.as_tensor(np.ones((n, 1), np.float32)), pooled)
    return tc.concat([x, tiled], axis=1)


def _res_block(store, name: str, x: Tensor, out_dim: int) -> Tensor:
    h = tc.relu(x)
    h = _linear(store, f"{name}.fc0", h)
    h = _linear(store, f"{name}.fc1", tc.relu(h))
    if x.shape[1] != out_dim:
        x = tc.matmul(x, store[f"{name}.skip.w"])
    return x + h


def spatial_encode(points, store: dict[str, Tensor], prefix: str,
                   cfg: NetConfig) -> Tensor:
    """Encode one point cloud into a fixed-size code.

    A residual point network: after each of the first four blocks the
    per-feature max over points is concatenated back to every point;
    the fifth block is pooled and mapped to the output dimension.

    Args:
        points: [N, 3] surface samples.
        prefix: "enc.shape" or "enc.pose".

    Returns:
        [out_dim] code (shape_dims or pose_dims).
    """
    x = tc.as_tensor(points)
    if x.ndim != 2 or x.shape[1] != 3:
        raise tc.ShapeMismatch(f"points must be [N, 3], got {x.shape}")
    x = _linear(store, f"{prefix}.lift", x)
    widths = cfg.spatial_widths
    for i, w in enumerate(widths):
        x = _res_block(store, f"{prefix}.block{i}", x, w)
        if i < len(widths) - 1:
            x = _pool_concat(x)
    pooled = tc.tmax(x, axis=0)
    head_w = store[f"{prefix}.head.w"]
    return tc.matmul(pooled, head_w) + store[f"{prefix}.head.b"]


def _frame_feature(points, store, cfg: NetConfig) -> Tensor:
    """Shared shallow point network applied to one frame's samples."""
    x = tc.relu(_linear(store, "enc.feat.l0", tc.as_tensor(points)))
    x = tc.relu(_linear(store, "enc.feat.l1", _pool_concat(x)))
    x = tc.relu(_linear(store, "enc.feat.l2", _pool_concat(x)))
    return tc.tmax(x, axis=0)


def temporal_encode(frames, store: dict[str, Tensor],
                    cfg: NetConfig) -> tuple[Tensor, Tensor]:
    """Motion and auxiliary codes from a point-cloud sequence.

    Args:
        frames: [L, N, 3] array or list of [N_t, 3] arrays.

    Returns:
        (c_m [motion_dims], c_a [aux_dims]) read from the final hidden
        state of two separate GRU stacks over shared frame features.
    """
    if isinstance(frames, np.ndarray) and frames.ndim == 3:
        frames = list(frames)
    feats = [tc.reshape(_frame_feature(f, store, cfg), (1, cfg.feat_hidden))
             for f in frames]
    seq = tc.concat(feats, axis=0)
    L = seq.shape[0]

    def run(prefix: str, out_dim: int) -> Tensor:
        out = tc.stacked_gru(seq, gate_weights(store, prefix, cfg.gru_layers))
        last = tc.reshape(tc.narrow(out, 0, L - 1, 1), (cfg.gru_hidden,))
        return tc.matmul(last, store[f"{prefix}.head.w"]) + store[f"{prefix}.head.b"]

    return run("enc.gru_m", cfg.motion_dims), run("enc.gru_a", cfg.aux_dims)


def _tile_rows(row: Tensor, n: int) -> Tensor:
    return tc.mul(tc.as_tensor(np.ones((n, 1), np.float32)),
                  tc.reshape(row, (1, row.shape[0])))


def motion_comp(poses, c_m, c_a, store: dict[str, Tensor], cfg: NetConfig) -> Tensor:
    """Per-frame pose residuals conditioned on the sequence codes.

    Args:
        poses: [L, 72] basis-decoded poses.

    Returns:
        [L, 72] refined poses (input plus predicted residual; the
        residual head starts at zero, so this is the identity at init).
    """
    poses = tc.as_tensor(poses)
    L = poses.shape[0]
    cond = tc.concat([tc.as_tensor(c_m), tc.as_tensor(c_a)], axis=0)
    inp = tc.concat([poses, _tile_rows(cond, L)], axis=1)
    h = tc.stacked_gru(inp, gate_weights(store, "comp.motion", cfg.gru_layers))
    res = tc.matmul(h, store["comp.motion.head.w"]) + store["comp.motion.head.b"]
    return poses + res


def shape_comp(c_a, poses, store: dict[str, Tensor], cfg: NetConfig) -> Tensor:
    """Per-frame canonical clothing offsets.

    Conditions a GRU on the auxiliary code and the flattened rotation
    matrices of the clothing joints, then decodes a per-frame latent to
    per-vertex offsets through a shared two-layer head on
    [frame latent, vertex embedding]. Output head starts at zero.

    Returns:
        [L, V, 3] canonical-space offsets.
    """
    poses = tc.as_tensor(poses)
    L, J, V = poses.shape[0], cfg.joints, cfg.verts
    rots = rodrigues(tc.reshape(poses, (L * J, 3)))
    rots = tc.reshape(rots, (L * J, 9))
    cloth = np.asarray(cfg.clothing_joints, dtype=np.int64)
    idx = (np.arange(L)[:, None] * J + cloth[None, :]).ravel()
    rot_feat = tc.reshape(tc.gather(rots, idx), (L, 9 * cloth.size))
    inp = tc.concat([_tile_rows(tc.as_tensor(c_a), L), rot_feat], axis=1)
    h = tc.stacked_gru(inp, gate_weights(store, "comp.shape", cfg.gru_layers))
    lat = tc.matmul(h, store["comp.shape.latent.w"]) + store["comp.shape.latent.b"]

    ones_v = tc.as_tensor(np.ones((1, V, 1), np.float32))
    lat_t = tc.mul(tc.reshape(lat, (L, 1, cfg.shape_latent)), ones_v)   # [L, V, D]
    ones_l = tc.as_tensor(np.ones((L, 1, 1), np.float32))
    emb_t = tc.mul(tc.reshape(store["comp.shape.embed"], (1, V, cfg.vertex_embed)),
                   ones_l)
    x = tc.reshape(tc.concat([lat_t, emb_t], axis=2),
                   (L * V, cfg.shape_latent + cfg.vertex_embed))
    x = tc.relu(_linear(store, "comp.shape.dec.fc0", x))
    off = _linear(store, "comp.shape.dec.out", x)
    return tc.reshape(off, (L, V, 3))


# ---------------------------------------------------------------------------
# config persistence

_SCALAR_FIELDS = ("joints", "verts", "shape_dims", "motion_dims", "aux_dims",
                  "seq_len", "feat_hidden", "gru_hidden", "gru_layers",
                  "shape_latent", "vertex_embed", "pose_dims")


def config_entries(cfg: NetConfig) -> dict[str, np.ndarray]:
    out = {f"config.{k}": np.float32(getattr(cfg, k)) for k in _SCALAR_FIELDS}
    out["config.spatial_widths"] = np.asarray(cfg.spatial_widths, np.float32)
    out["config.clothing_joints"] = np.asarray(cfg.clothing_joints, np.float32)
    return out


def config_from_entries(entries: dict[str, np.ndarray]) -> NetConfig:
    kw = {k: int(entries[f"config.{k}"]) for k in _SCALAR_FIELDS}
    kw["spatial_widths"] = tuple(int(w) for w in entries["config.spatial_widths"])
    kw["clothing_joints"] = tuple(int(j) for j in entries["config.clothing_joints"])
    return NetConfig(**kw)
