"""Shared fixtures.

The micro fixtures are cheap and built per session. The desk fixture
(dataset plus a briefly trained two-stage checkpoint) takes a few
minutes; set BODY4D_TEST_CACHE=1 to reuse it across runs from
/tmp/body4d_test_cache during development.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest

from body4d import dataio, motion_model as mm, networks as nw, pipeline as pl
from body4d.presets import PRESETS


def make_checkpoint(model, train_seqs, preset_name: str, q: float = 0.9,
                    seed: int = 0) -> pl.Checkpoint:
    basis = mm.fit_motion_basis(np.stack([s.pose_seq for s in train_seqs]),
                                q_target=q)
    preset = PRESETS[preset_name]
    cfg = nw.NetConfig.from_preset(
        preset, motion_dims=basis.k_global + basis.k_body,
        clothing_joints=nw.default_clothing_joints(model.parents))
    return pl.Checkpoint(cfg=cfg, params=nw.init_weights(cfg, seed), basis=basis)


@pytest.fixture(scope="session")
def micro_ds():
    return dataio.gen_synthetic_dataset("micro", seed=0)


@pytest.fixture(scope="session")
def micro_ckpt_init(micro_ds):
    return make_checkpoint(micro_ds.model, micro_ds.train, "micro")


@pytest.fixture(scope="session")
def micro_ckpt_trained(micro_ds, tmp_path_factory):
    """Micro checkpoint with a short two-stage training run."""
    path = tmp_path_factory.mktemp("micro_ckpt") / "ck.hta"
    ckpt = make_checkpoint(micro_ds.model, micro_ds.train, "micro")
    pl.train(micro_ds.model, ckpt, micro_ds.train,
             pl.TrainConfig(stage=1, iterations=60, lr=1e-3, seed=0))
    pl.train(micro_ds.model, ckpt, micro_ds.train,
             pl.TrainConfig(stage=2, iterations=30, lr=1e-3, seed=0))
    pl.save_checkpoint(path, ckpt)
    return pl.load_checkpoint(path)


DESK_TRAIN = dict(n_train=48, n_test=20, n_points=256)
_DESK_CACHE_TAG = "desk-v1"


@pytest.fixture(scope="session")
def desk_assets(tmp_path_factory):
    """Desk dataset and a reduced-iteration two-stage checkpoint."""
    cache_root = None
    if os.environ.get("BODY4D_TEST_CACHE"):
        cache_root = Path("/tmp/body4d_test_cache") / _DESK_CACHE_TAG
        ck_path = cache_root / "ck.hta"
        if ck_path.exists():
            ds = dataio.gen_synthetic_dataset("desk", seed=0, **DESK_TRAIN)
            return ds, pl.load_checkpoint(ck_path)
    ds = dataio.gen_synthetic_dataset("desk", seed=0, **DESK_TRAIN)
    ckpt = make_checkpoint(ds.model, ds.train, "desk")
    pl.train(ds.model, ckpt, ds.train,
             pl.TrainConfig(stage=1, iterations=300, lr=1e-3, batch=8, seed=0))
    pl.train(ds.model, ckpt, ds.train,
             pl.TrainConfig(stage=2, iterations=150, lr=1e-3, batch=4, seed=0))
    if cache_root is not None:
        cache_root.mkdir(parents=True, exist_ok=True)
        pl.save_checkpoint(cache_root / "ck.hta", ckpt)
    else:
        path = tmp_path_factory.mktemp("desk_ckpt") / "ck.hta"
        pl.save_checkpoint(path, ckpt)
    return ds, ckpt
