"""Size presets tying model, network, and data dimensions together.

"full" mirrors the reference configuration (hidden 512 GRUs, 128-wide
shallow point network, 8192 surface samples, 200k stage budget); "desk"
scales every hidden size down proportionally for workstation runs, and
"micro" is the smallest legal configuration used by fast gradient
checks.
"""

from __future__ import annotations

from dataclasses import dataclass

__all__ = ["Preset", "PRESETS"]


@dataclass(frozen=True)
class Preset:
    name: str
    joints: int
    verts: int
    shape_dims: int
    seq_len: int
    n_points: int
    n_train: int
    n_test: int
    spatial_widths: tuple[int, ...]
    feat_hidden: int
    gru_hidden: int
    gru_layers: int
    aux_dims: int
    shape_latent: int
    vertex_embed: int
    iterations: int  # default per-stage training budget


PRESETS: dict[str, Preset] = {
    "micro": Preset(
        name="micro", joints=24, verts=24, shape_dims=10, seq_len=3,
        n_points=16, n_train=8, n_test=4,
        spatial_widths=(8, 8, 8, 8, 8), feat_hidden=8, gru_hidden=8,
        gru_layers=2, aux_dims=8, shape_latent=8, vertex_embed=16,
        iterations=2000),
    "desk": Preset(
        name="desk", joints=24, verts=600, shape_dims=10, seq_len=30,
        n_points=256, n_train=200, n_test=40,
        spatial_widths=(8, 16, 16, 32, 64), feat_hidden=16, gru_hidden=64,
        gru_layers=2, aux_dims=16, shape_latent=16, vertex_embed=16,
        iterations=50_000),
    "full": Preset(
        name="full", joints=24, verts=6890, shape_dims=10, seq_len=30,
        n_points=8192, n_train=200, n_test=40,
        spatial_widths=(64, 128, 128, 256, 512), feat_hidden=128,
        gru_hidden=512, gru_layers=2, aux_dims=128, shape_latent=64,
        vertex_embed=16, iterations=200_000),
}
