"""Training loop, auto-decoding fits, applications, and checkpoints.

Everything here runs on the micro preset; desk-scale behavior lives in
the acceptance suite.
"""

import numpy as np
import pytest

import body4d.tensorcore as tc
from body4d import pipeline as pl
from body4d.objectives import pve

from conftest import make_checkpoint


def clouds(seq):
    return seq.points


class TestEncodeDecode:
    def test_encode_shapes(self, micro_ds, micro_ckpt_init):
        c = pl.encode_sequence(micro_ckpt_init, clouds(micro_ds.train[0]))
        cfg = micro_ckpt_init.cfg
        assert c.c_s.shape == (cfg.shape_dims,)
        assert c.c_p.shape == (72,)
        assert c.c_m.shape == (cfg.motion_dims,)
        assert c.c_a.shape == (cfg.aux_dims,)

    def test_stage2_decode_equals_stage1_at_init(self, micro_ds, micro_ckpt_init):
        # zero-initialized compensation heads keep the decode identical
        ds, ckpt = micro_ds, micro_ckpt_init
        codes = pl.encode_sequence(ckpt, clouds(ds.train[0]))
        with tc.no_grad():
            d1 = pl.decode_codes(ds.model, ckpt, codes.c_s, codes.c_p, codes.c_m,
                                 codes.c_a, codes.c_a, apply_comp=False)
            d2 = pl.decode_codes(ds.model, ckpt, codes.c_s, codes.c_p, codes.c_m,
                                 codes.c_a, codes.c_a, apply_comp=True)
        np.testing.assert_array_equal(d1.poses_linear.data, d2.poses.data)
        np.testing.assert_array_equal(d1.body.verts.data, d2.clothed.verts.data)
        assert not d2.offsets.data.any()

    def test_retarget_self_is_reconstruct(self, micro_ds, micro_ckpt_trained):
        ds, ckpt = micro_ds, micro_ckpt_trained
        pts = clouds(ds.test[0])
        a = pl.reconstruct(ds.model, ckpt, pts)
        b = pl.retarget(ds.model, ckpt, pts, pts)
        np.testing.assert_array_equal(a.verts_clothed, b.verts_clothed)
        np.testing.assert_array_equal(a.poses, b.poses)
        np.testing.assert_array_equal(a.offsets, b.offsets)

    def test_retarget_mixes_codes(self, micro_ds, micro_ckpt_trained):
        ds, ckpt = micro_ds, micro_ckpt_trained
        out = pl.retarget(ds.model, ckpt, clouds(ds.train[0]), clouds(ds.train[1]))
        ident = pl.encode_sequence(ckpt, clouds(ds.train[0]))
        mot = pl.encode_sequence(ckpt, clouds(ds.train[1]))
        np.testing.assert_array_equal(out.codes.c_s, ident.c_s)
        np.testing.assert_array_equal(out.codes.c_m, mot.c_m)
        np.testing.assert_array_equal(out.codes.c_p, mot.c_p)

    def test_reconstruction_shapes(self, micro_ds, micro_ckpt_trained):
        ds, ckpt = micro_ds, micro_ckpt_trained
        L, V, J = ckpt.cfg.seq_len, ckpt.cfg.verts, ckpt.cfg.joints
        r = pl.reconstruct(ds.model, ckpt, clouds(ds.test[0]))
        assert r.poses.shape == (L, 72)
        assert r.verts_body.shape == (L, V, 3)
        assert r.verts_clothed.shape == (L, V, 3)
        assert r.offsets.shape == (L, V, 3)
        assert r.joints.shape == (L, J, 3)


class TestTraining:
    def test_loss_decreases(self, micro_ds):
        ds = micro_ds
        ckpt = make_checkpoint(ds.model, ds.train, "micro")
        hist = pl.train(ds.model, ckpt, ds.train,
                        pl.TrainConfig(stage=1, iterations=40, lr=1e-3, seed=0))
        assert len(hist) == 40
        assert np.mean(hist[-8:]) < np.mean(hist[:8])

    def test_stage1_leaves_comp_weights_untouched(self, micro_ds):
        ds = micro_ds
        ckpt = make_checkpoint(ds.model, ds.train, "micro")
        before = {k: v.data.copy() for k, v in ckpt.params.items()}
        pl.train(ds.model, ckpt, ds.train,
                 pl.TrainConfig(stage=1, iterations=5, lr=1e-3, seed=0))
        for k, v in before.items():
            if k.startswith("comp."):
                np.testing.assert_array_equal(ckpt.params[k].data, v)
        moved = [k for k, v in before.items()
                 if k.startswith("enc.")
                 and not np.array_equal(ckpt.params[k].data, v)]
        assert moved

    def test_stage2_moves_comp_weights(self, micro_ds):
        ds = micro_ds
        ckpt = make_checkpoint(ds.model, ds.train, "micro")
        before = ckpt.params["comp.motion.head.w"].data.copy()
        pl.train(ds.model, ckpt, ds.train,
                 pl.TrainConfig(stage=2, iterations=5, lr=1e-3, seed=0))
        assert not np.array_equal(ckpt.params["comp.motion.head.w"].data, before)

    def test_deterministic_given_seed(self, micro_ds):
        ds = micro_ds

        def run():
            ckpt = make_checkpoint(ds.model, ds.train, "micro")
            hist = pl.train(ds.model, ckpt, ds.train,
                            pl.TrainConfig(stage=1, iterations=6, lr=1e-3, seed=0))
            return hist, ckpt

        h1, c1 = run()
        h2, c2 = run()
        assert h1 == h2
        for k in c1.params:
            np.testing.assert_array_equal(c1.params[k].data, c2.params[k].data)

    def test_threaded_matches_serial(self, micro_ds):
        ds = micro_ds

        def run(threads):
            ckpt = make_checkpoint(ds.model, ds.train, "micro")
            hist = pl.train(ds.model, ckpt, ds.train,
                            pl.TrainConfig(stage=1, iterations=5, lr=1e-3,
                                           seed=0, threads=threads))
            return hist, ckpt

        h1, c1 = run(1)
        h3, c3 = run(3)
        assert h1 == h3
        for k in c1.params:
            np.testing.assert_array_equal(c1.params[k].data, c3.params[k].data)

    def test_lr_schedule_applies_drop(self, micro_ds):
        ds = micro_ds
        ckpt = make_checkpoint(ds.model, ds.train, "micro")
        seen = []
        pl.train(ds.model, ckpt, ds.train,
                 pl.TrainConfig(stage=1, iterations=6, lr=1e-3, lr_drop_at=3,
                                lr_after_drop=1e-5, seed=0),
                 log_fn=lambda step, loss, lr: seen.append(lr))
        assert seen[:3] == [1e-3] * 3
        assert seen[3:] == [1e-5] * 3

    def test_batch_defaults(self):
        assert pl.TrainConfig(stage=1).resolved_batch() == 16
        assert pl.TrainConfig(stage=2).resolved_batch() == 4
        assert pl.TrainConfig(stage=1, batch=7).resolved_batch() == 7

    def test_bad_stage_and_empty_dataset(self, micro_ds, micro_ckpt_init):
        with pytest.raises(ValueError):
            pl.train(micro_ds.model, micro_ckpt_init, micro_ds.train,
                     pl.TrainConfig(stage=3))
        with pytest.raises(ValueError):
            pl.train(micro_ds.model, micro_ckpt_init, [],
                     pl.TrainConfig(stage=1, iterations=1))

    def test_divergence_raises(self, micro_ds):
        ds = micro_ds
        ckpt = make_checkpoint(ds.model, ds.train, "micro")
        ckpt.params["enc.shape.lift.w"].data[:] = np.nan
        with pytest.raises(pl.TrainingDiverged):
            pl.train(ds.model, ckpt, ds.train,
                     pl.TrainConfig(stage=1, iterations=2, lr=1e-3, seed=0))


@pytest.fixture(scope="module")
def fit_cfg():
    return pl.FitConfig(loss="vertex_l1", iterations=40, lr=3e-2, seed=0)


class TestAutodecodeFit:
    def test_vertex_fit_reduces_error(self, micro_ds, micro_ckpt_trained, fit_cfg):
        ds, ckpt = micro_ds, micro_ckpt_trained
        target = ds.test[0].verts_clothed
        res = pl.autodecode_fit(ds.model, ckpt, target, fit_cfg)
        assert res.final_loss < res.loss_history[0]
        assert res.recon.verts_clothed.shape == target.shape

    def test_safeguard_history_nonincreasing(self, micro_ds, micro_ckpt_trained):
        ds, ckpt = micro_ds, micro_ckpt_trained
        cfg = pl.FitConfig(loss="vertex_l1", iterations=50, lr=2e-1, seed=0)
        res = pl.autodecode_fit(ds.model, ckpt, ds.test[0].verts_clothed, cfg)
        h = np.array(res.loss_history)
        assert (np.diff(h) <= 1e-12).all()
        assert res.final_loss == pytest.approx(min(h), rel=1e-6)

    def test_safeguard_off_can_increase(self, micro_ds, micro_ckpt_trained):
        ds, ckpt = micro_ds, micro_ckpt_trained
        cfg = pl.FitConfig(loss="vertex_l1", iterations=50, lr=2e-1, seed=0,
                           safeguard=False)
        res = pl.autodecode_fit(ds.model, ckpt, ds.test[0].verts_clothed, cfg)
        assert (np.diff(res.loss_history) > 0).any()

    def test_chamfer_and_p2s_paths(self, micro_ds, micro_ckpt_trained):
        ds, ckpt = micro_ds, micro_ckpt_trained
        pts = clouds(ds.test[0])
        for loss in ("chamfer", "p2s"):
            cfg = pl.FitConfig(loss=loss, iterations=8, n_sample=64, seed=0)
            res = pl.autodecode_fit(ds.model, ckpt, pts, cfg)
            assert np.isfinite(res.final_loss)
            assert res.final_loss <= res.loss_history[0]

    def test_keypoint_path(self, micro_ds, micro_ckpt_trained):
        ds, ckpt = micro_ds, micro_ckpt_trained
        cfg = pl.FitConfig(loss="keypoint", iterations=8, seed=0)
        res = pl.autodecode_fit(ds.model, ckpt, ds.test[0].joints, cfg)
        assert np.isfinite(res.final_loss)

    def test_unknown_loss_rejected(self, micro_ds, micro_ckpt_trained):
        with pytest.raises(ValueError, match="unknown fit loss"):
            pl.autodecode_fit(micro_ds.model, micro_ckpt_trained,
                              micro_ds.test[0].points,
                              pl.FitConfig(loss="emd"))

    def test_dense_shape_validated(self, micro_ds, micro_ckpt_trained):
        bad = micro_ds.test[0].verts_clothed[:, :5]
        with pytest.raises(ValueError):
            pl.autodecode_fit(micro_ds.model, micro_ckpt_trained, bad,
                              pl.FitConfig(loss="vertex_l1"))

    def test_mask_semantics(self, micro_ds, micro_ckpt_trained):
        ds, ckpt = micro_ds, micro_ckpt_trained
        L = ckpt.basis.seq_len
        mask = np.zeros(L, dtype=bool)
        mask[0] = True
        cfg = pl.FitConfig(loss="vertex_l1", iterations=4, seed=0)
        res = pl.autodecode_fit(ds.model, ckpt, ds.test[0].verts_clothed, cfg,
                                frame_mask=mask)
        np.testing.assert_array_equal(res.observed_mask, mask)

    def test_empty_frames_automasked(self, micro_ds, micro_ckpt_trained):
        ds, ckpt = micro_ds, micro_ckpt_trained
        frames = [p.copy() for p in clouds(ds.test[0])]
        frames[2] = np.zeros((0, 3), np.float32)
        cfg = pl.FitConfig(loss="p2s", iterations=2, seed=0)
        res = pl.autodecode_fit(ds.model, ckpt, frames, cfg)
        assert not res.observed_mask[2]
        assert res.observed_mask.sum() == len(frames) - 1

    def test_all_masked_raises(self, micro_ds, micro_ckpt_trained):
        ds, ckpt = micro_ds, micro_ckpt_trained
        L = ckpt.basis.seq_len
        with pytest.raises(ValueError, match="masked"):
            pl.autodecode_fit(ds.model, ckpt, ds.test[0].verts_clothed,
                              pl.FitConfig(loss="vertex_l1"),
                              frame_mask=np.zeros(L, dtype=bool))

    def test_bad_mask_shape(self, micro_ds, micro_ckpt_trained):
        L = micro_ckpt_trained.basis.seq_len
        with pytest.raises(ValueError, match="frame_mask"):
            pl.autodecode_fit(micro_ds.model, micro_ckpt_trained,
                              micro_ds.test[0].verts_clothed,
                              pl.FitConfig(loss="vertex_l1"),
                              frame_mask=np.ones(L + 1, dtype=bool))

    def test_fit_translation_adds_code(self, micro_ds, micro_ckpt_trained):
        ds, ckpt = micro_ds, micro_ckpt_trained
        shifted = ds.test[0].verts_clothed + np.float32(0.4)
        cfg = pl.FitConfig(loss="vertex_l1", iterations=30, seed=0,
                           fit_translation=True)
        res = pl.autodecode_fit(ds.model, ckpt, shifted, cfg)
        assert "trans" in res.codes
        assert res.codes["trans"].shape == (ckpt.basis.seq_len, 3)
        assert np.abs(res.codes["trans"]).max() > 0

    def test_deterministic(self, micro_ds, micro_ckpt_trained, fit_cfg):
        ds, ckpt = micro_ds, micro_ckpt_trained
        a = pl.autodecode_fit(ds.model, ckpt, ds.test[0].verts_clothed, fit_cfg)
        b = pl.autodecode_fit(ds.model, ckpt, ds.test[0].verts_clothed, fit_cfg)
        assert a.loss_history == b.loss_history
        for k in a.codes:
            np.testing.assert_array_equal(a.codes[k], b.codes[k])


class TestApplications:
    def test_temporal_completion_runs(self, micro_ds, micro_ckpt_trained):
        ds, ckpt = micro_ds, micro_ckpt_trained
        L = ckpt.basis.seq_len
        mask = np.zeros(L, dtype=bool)
        mask[::2] = True
        cfg = pl.FitConfig(loss="vertex_l1", iterations=10, seed=0)
        res = pl.complete_temporal(ds.model, ckpt, ds.test[0].verts_clothed,
                                   mask, cfg)
        assert res.recon.verts_clothed.shape[0] == L  # held-out frames decoded

    def test_orbit_masks_keep_roughly_half(self, micro_ds):
        pts = micro_ds.test[0].points
        masks = pl.orbit_keep_masks(pts)
        fracs = [m.mean() for m in masks]
        assert all(0.1 < f < 0.9 for f in fracs)
        directions_differ = masks[0] != masks[len(masks) // 2]
        assert directions_differ.any()

    def test_spatial_completion_runs(self, micro_ds, micro_ckpt_trained):
        ds, ckpt = micro_ds, micro_ckpt_trained
        cfg = pl.FitConfig(iterations=6, n_sample=32, seed=0)
        res = pl.complete_spatial(ds.model, ckpt, ds.test[0].points, cfg)
        assert np.isfinite(res.final_loss)

    def test_predict_future_masks_suffix(self, micro_ds, micro_ckpt_trained):
        ds, ckpt = micro_ds, micro_ckpt_trained
        L = ckpt.basis.seq_len
        cfg = pl.FitConfig(loss="vertex_l1", iterations=6, seed=0)
        res = pl.predict_future(ds.model, ckpt, ds.test[0].verts_clothed,
                                n_observed=L // 2, cfg=cfg)
        assert res.observed_mask[:L // 2].all()
        assert not res.observed_mask[L // 2:].any()
        assert res.recon.verts_clothed.shape[0] == L

    def test_predict_future_validates_n(self, micro_ds, micro_ckpt_trained):
        with pytest.raises(ValueError):
            pl.predict_future(micro_ds.model, micro_ckpt_trained,
                              micro_ds.test[0].verts_clothed, n_observed=0)


class TestCheckpoint:
    def test_round_trip_bitwise(self, micro_ds, micro_ckpt_trained, tmp_path):
        ckpt = micro_ckpt_trained
        p = tmp_path / "ck.hta"
        pl.save_checkpoint(p, ckpt)
        back = pl.load_checkpoint(p)
        assert back.cfg == ckpt.cfg
        assert set(back.params) == set(ckpt.params)
        for k in ckpt.params:
            np.testing.assert_array_equal(back.params[k].data, ckpt.params[k].data)
        np.testing.assert_array_equal(back.basis.comps_body, ckpt.basis.comps_body)
        # and decodes identically
        r1 = pl.reconstruct(micro_ds.model, ckpt, micro_ds.test[0].points)
        r2 = pl.reconstruct(micro_ds.model, back, micro_ds.test[0].points)
        np.testing.assert_array_equal(r1.verts_clothed, r2.verts_clothed)

    def test_missing_param_rejected(self, micro_ckpt_trained, tmp_path):
        from body4d.dataio import read_archive, write_archive
        p = tmp_path / "ck.hta"
        pl.save_checkpoint(p, micro_ckpt_trained)
        entries = read_archive(p)
        entries.pop("comp.motion.head.w")
        write_archive(p, entries)
        with pytest.raises(ValueError, match="missing parameters"):
            pl.load_checkpoint(p)


def test_pve_sanity_on_trained_micro(micro_ds, micro_ckpt_trained):
    # trained micro reconstruction beats the untrained one on train data
    ds, ckpt = micro_ds, micro_ckpt_trained
    fresh = make_checkpoint(ds.model, ds.train, "micro")
    s = ds.train[0]
    trained = pl.reconstruct(ds.model, ckpt, s.points)
    untrained = pl.reconstruct(ds.model, fresh, s.points)
    assert pve(trained.verts_body, s.verts_body) < \
        pve(untrained.verts_body, s.verts_body)
