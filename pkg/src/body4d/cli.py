"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Progress goes
to stdout as space-separated key=value lines. Every command writes a
run.meta JSON next to its outputs recording the seed, the arguments,
and content hashes of the inputs; nothing time- or host-dependent goes
in there, so identical runs produce identical bytes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import pipeline as pl
from .body_model import load_model, save_model
from .dataio import (ArchiveError, SyntheticSequence, gen_synthetic_dataset,
                     export_obj_sequence, read_archive, write_archive)
from .motion_model import (basis_from_entries, fit_motion_basis,
                           save_basis_entries)
from .networks import NetConfig, default_clothing_joints, init_weights
from .objectives import chamfer, mpjpe_family, pve, volumetric_iou
from .presets import PRESETS

FPS = 30.0  # synthetic sequences are generated at a nominal 30 frames/s


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _log(**kv) -> None:
    print(" ".join(f"{k}={_fmt(v)}" for k, v in kv.items()))


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_meta(out: Path, command: str, args: argparse.Namespace,
                inputs: list[Path]) -> None:
    meta = {
        "command": command,
        "version": __version__,
        "args": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "inputs": {str(p): _sha256(p) for p in inputs},
    }
    if out.suffix:
        meta_path = out.with_name(out.name + ".meta.json")
    else:
        out.mkdir(parents=True, exist_ok=True)
        meta_path = out / "run.meta"
    meta_path.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# dataset helpers

def _dataset_paths(data_dir: Path, split: str) -> list[Path]:
    return sorted(data_dir.glob(f"{split}_*.hta"))


def _load_sequences(data_dir: Path, split: str) -> list[SyntheticSequence]:
    paths = _dataset_paths(data_dir, split)
    if not paths:
        raise FileNotFoundError(f"no {split}_*.hta sequences under {data_dir}")
    return [SyntheticSequence.load(p) for p in paths]


def _parse_seq_ref(ref: str) -> tuple[str, int]:
    split, _, idx = ref.partition(":")
    if split not in ("train", "test") or not idx.isdigit():
        raise ValueError(f"sequence ref must look like test:0, got {ref!r}")
    return split, int(idx)


def _load_one(data_dir: Path, ref: str) -> tuple[SyntheticSequence, Path]:
    split, idx = _parse_seq_ref(ref)
    paths = _dataset_paths(data_dir, split)
    if idx >= len(paths):
        raise IndexError(f"{ref}: only {len(paths)} {split} sequences present")
    return SyntheticSequence.load(paths[idx]), paths[idx]


def _save_result(out_dir: Path, model, recon: pl.Reconstruction) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "result.hta"
    write_archive(path, {
        "verts": recon.verts_clothed,
        "verts_body": recon.verts_body,
        "joints": recon.joints,
        "poses": recon.poses,
        "offsets": recon.offsets,
        "faces": model.faces.astype(np.float32),
        "code.c_s": recon.codes.c_s, "code.c_p": recon.codes.c_p,
        "code.c_m": recon.codes.c_m, "code.c_a": recon.codes.c_a,
    })
    return path


# ---------------------------------------------------------------------------
# commands

def _cmd_gen_data(args) -> int:
    ds = gen_synthetic_dataset(args.preset, seed=args.seed, n_train=args.train,
                               n_test=args.test, n_points=args.points)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(ds.model, out / "model.hta")
    for seq in ds.train + ds.test:
        seq.save(out / f"{seq.name}.hta")
    _write_meta(out, "gen-data", args, [])
    _log(preset=args.preset, seed=args.seed, n_train=len(ds.train),
         n_test=len(ds.test), out=out)
    return 0


def _cmd_fit_lmm(args) -> int:
    data = Path(args.data)
    seqs = _load_sequences(data, "train")
    poses = np.stack([s.pose_seq for s in seqs])
    basis = fit_motion_basis(poses, q_target=args.q)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_archive(out, save_basis_entries(basis))
    _write_meta(out, "fit-lmm", args, _dataset_paths(data, "train"))
    _log(sequences=len(seqs), q=args.q, k_global=basis.k_global,
         k_body=basis.k_body, out=out)
    return 0


def _cmd_train(args) -> int:
    data = Path(args.data)
    model = load_model(data / "model.hta")
    seqs = _load_sequences(data, "train")
    inputs = [data / "model.hta"] + _dataset_paths(data, "train")

    if args.init_from:
        ckpt = pl.load_checkpoint(args.init_from)
        inputs.append(Path(args.init_from))
    else:
        if args.stage != 1:
            raise ValueError("stage 2 must start from a stage-1 checkpoint "
                             "(--init-from)")
        if not args.basis:
            raise ValueError("stage 1 needs --basis or --init-from")
        basis = basis_from_entries(read_archive(args.basis))
        inputs.append(Path(args.basis))
        preset = PRESETS[args.preset]
        cfg = NetConfig.from_preset(
            preset, motion_dims=basis.k_global + basis.k_body,
            clothing_joints=default_clothing_joints(model.parents))
        ckpt = pl.Checkpoint(cfg=cfg, params=init_weights(cfg, args.seed),
                             basis=basis)

    tcfg = pl.TrainConfig(stage=args.stage, iterations=args.iterations,
                          lr=args.lr, lr_drop_at=args.lr_drop_at,
                          lr_after_drop=args.lr_after_drop, batch=args.batch,
                          seed=args.seed, threads=args.threads)
    log_every = max(1, args.iterations // 20)

    def log_fn(step, loss, lr):
        if step % log_every == 0 or step == args.iterations - 1:
            _log(step=step, loss=loss, lr=lr)

    history = pl.train(model, ckpt, seqs, tcfg, log_fn=log_fn)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    pl.save_checkpoint(out, ckpt)
    _write_meta(out, "train", args, inputs)
    _log(stage=args.stage, iterations=len(history),
         final_loss=history[-1] if history else float("nan"), out=out)
    return 0


def _load_ckpt_and_data(args) -> tuple:
    data = Path(args.data)
    model = load_model(data / "model.hta")
    ckpt = pl.load_checkpoint(args.ckpt)
    return model, ckpt, data


def _report_recon(prefix: str, recon: pl.Reconstruction, seq: SyntheticSequence):
    kv = {}
    kv[f"{prefix}_pve_mm"] = 1000.0 * pve(recon.verts_clothed, seq.verts_clothed)
    kv[f"{prefix}_pve_body_mm"] = 1000.0 * pve(recon.verts_body, seq.verts_body)
    je = mpjpe_family(recon.joints, seq.joints, fps=FPS)
    kv[f"{prefix}_mpjpe_mm"] = 1000.0 * je.mpjpe
    kv[f"{prefix}_pa_mpjpe_mm"] = 1000.0 * je.pa_mpjpe
    _log(**kv)
    return kv


def _cmd_reconstruct(args) -> int:
    model, ckpt, data = _load_ckpt_and_data(args)
    seq, seq_path = _load_one(data, args.seq)
    recon = pl.reconstruct(model, ckpt, seq.points,
                           apply_comp=not args.no_comp)
    out = Path(args.out)
    path = _save_result(out, model, recon)
    _write_meta(out, "reconstruct", args,
                [data / "model.hta", Path(args.ckpt), seq_path])
    _report_recon("recon", recon, seq)
    _log(seq=args.seq, out=path)
    return 0


def _cmd_retarget(args) -> int:
    model, ckpt, data = _load_ckpt_and_data(args)
    ident, ident_path = _load_one(data, args.identity)
    motion, motion_path = _load_one(data, args.motion)
    recon = pl.retarget(model, ckpt, ident.points, motion.points,
                        apply_comp=not args.no_comp)
    out = Path(args.out)
    path = _save_result(out, model, recon)
    _write_meta(out, "retarget", args,
                [data / "model.hta", Path(args.ckpt), ident_path, motion_path])
    _log(identity=args.identity, motion=args.motion, out=path)
    return 0


def _fit_cfg(args, loss: str) -> pl.FitConfig:
    return pl.FitConfig(loss=loss, iterations=args.iterations, lr=args.lr,
                        n_sample=args.n_sample, seed=args.seed,
                        fit_translation=args.fit_translation)


def _cmd_complete(args) -> int:
    model, ckpt, data = _load_ckpt_and_data(args)
    seq, seq_path = _load_one(data, args.seq)
    L = seq.points.shape[0]
    if args.mode == "temporal":
        mask = np.zeros(L, dtype=bool)
        mask[::args.keep_every] = True
        fit = pl.complete_temporal(model, ckpt, seq.points, mask,
                                   _fit_cfg(args, args.loss))
    else:
        fit = pl.complete_spatial(model, ckpt, seq.points,
                                  _fit_cfg(args, "p2s"),
                                  revolutions=args.revolutions)
        mask = fit.observed_mask
    out = Path(args.out)
    path = _save_result(out, model, fit.recon)
    _write_meta(out, "complete", args,
                [data / "model.hta", Path(args.ckpt), seq_path])
    je_all = mpjpe_family(fit.recon.joints, seq.joints, fps=FPS)
    kv = dict(mode=args.mode, observed=int(mask.sum()), frames=L,
              final_loss=fit.final_loss, mpjpe_mm=1000.0 * je_all.mpjpe)
    if args.mode == "temporal" and (~mask).any():
        je_held = mpjpe_family(fit.recon.joints[~mask], seq.joints[~mask])
        je_obs = mpjpe_family(fit.recon.joints[mask], seq.joints[mask])
        kv["mpjpe_observed_mm"] = 1000.0 * je_obs.mpjpe
        kv["mpjpe_heldout_mm"] = 1000.0 * je_held.mpjpe
    _log(**kv)
    _log(seq=args.seq, out=path)
    return 0


def _cmd_predict(args) -> int:
    model, ckpt, data = _load_ckpt_and_data(args)
    seq, seq_path = _load_one(data, args.seq)
    fit = pl.predict_future(model, ckpt, seq.points, args.observed,
                            _fit_cfg(args, args.loss))
    out = Path(args.out)
    path = _save_result(out, model, fit.recon)
    _write_meta(out, "predict", args,
                [data / "model.hta", Path(args.ckpt), seq_path])
    mask = fit.observed_mask
    je_held = mpjpe_family(fit.recon.joints[~mask], seq.joints[~mask])
    _log(observed=args.observed, final_loss=fit.final_loss,
         mpjpe_future_mm=1000.0 * je_held.mpjpe, out=path)
    return 0


def _cmd_eval(args) -> int:
    model, ckpt, data = _load_ckpt_and_data(args)
    seqs = _load_sequences(data, args.split)
    if args.limit:
        seqs = seqs[:args.limit]
    rows = []
    for seq in seqs:
        recon = pl.reconstruct(model, ckpt, seq.points)
        je = mpjpe_family(recon.joints, seq.joints, fps=FPS)
        row = {
            "name": seq.name,
            "pve_mm": 1000.0 * pve(recon.verts_clothed, seq.verts_clothed),
            "pve_body_mm": 1000.0 * pve(recon.verts_body, seq.verts_body),
            "mpjpe_mm": 1000.0 * je.mpjpe,
            "pa_mpjpe_mm": 1000.0 * je.pa_mpjpe,
            "accel_mm_s2": 1000.0 * je.accel,
            "chamfer_mm": 1000.0 * np.mean([
                chamfer(recon.verts_clothed[t], seq.verts_clothed[t])
                for t in range(seq.points.shape[0])]),
        }
        if args.iou_frames:
            ious = [volumetric_iou(recon.verts_clothed[t], model.faces,
                                   seq.verts_clothed[t], model.faces,
                                   resolution=args.iou_resolution)
                    for t in range(min(args.iou_frames, seq.points.shape[0]))]
            row["iou"] = float(np.mean(ious))
        rows.append(row)
        _log(**{k: v for k, v in row.items()})
    keys = [k for k in rows[0] if k != "name"]
    summary = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {"split": args.split, "n_sequences": len(rows),
              "mean": summary, "per_sequence": rows}
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    _write_meta(out, "eval", args,
                [data / "model.hta", Path(args.ckpt)] + _dataset_paths(data, args.split))
    _log(**{f"mean_{k}": v for k, v in summary.items()})
    _log(split=args.split, n=len(rows), out=out / "report.json")
    return 0


def _cmd_export_obj(args) -> int:
    entries = read_archive(args.result)
    key = args.field
    if key not in entries:
        raise KeyError(f"result archive has no {key!r} entry "
                       f"(has {sorted(entries)})")
    verts = entries[key]
    faces = entries["faces"].astype(np.int64)
    out = Path(args.out)
    paths = export_obj_sequence(out, verts, faces)
    _write_meta(out, "export-obj", args, [Path(args.result)])
    _log(frames=len(paths), out=out)
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="body4d",
                description="Compositional 4D human bodies on a toy scale.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int, default=None, help="override sequence count")
    g.add_argument("--test", type=int, default=None)
    g.add_argument("--points", type=int, default=None, help="samples per frame")
    g.set_defaults(func=_cmd_gen_data)

    f = sub.add_parser("fit-lmm", help="fit the linear motion basis")
    f.add_argument("--data", required=True)
    f.add_argument("--q", type=float, default=0.9, help="variance fraction to keep")
    f.add_argument("--out", required=True)
    f.set_defaults(func=_cmd_fit_lmm)

    t = sub.add_parser("train", help="train encoder and compensation weights")
    t.add_argument("--data", required=True)
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--basis", help="basis archive (fresh stage-1 run)")
    t.add_argument("--init-from", help="checkpoint to continue from")
    t.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    t.add_argument("--iterations", type=int, required=True)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--lr-drop-at", type=int, default=200_000)
    t.add_argument("--lr-after-drop", type=float, default=1e-5)
    t.add_argument("--batch", type=int, default=None)
    t.add_argument("--threads", type=int, default=1)
    t.add_argument("--out", required=True)
    t.set_defaults(func=_cmd_train)

    r = sub.add_parser("reconstruct", help="encode and decode one sequence")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--seq", required=True, help="e.g. test:0")
    r.add_argument("--no-comp", action="store_true",
                   help="skip compensation networks (stage-1 style decode)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=_cmd_reconstruct)

    rt = sub.add_parser("retarget", help="identity from one clip, motion from another")
    rt.add_argument("--ckpt", required=True)
    rt.add_argument("--data", required=True)
    rt.add_argument("--identity", required=True)
    rt.add_argument("--motion", required=True)
    rt.add_argument("--no-comp", action="store_true")
    rt.add_argument("--out", required=True)
    rt.set_defaults(func=_cmd_retarget)

    def fit_args(sp):
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--data", required=True)
        sp.add_argument("--seq", required=True)
        sp.add_argument("--seed", type=int, required=True)
        sp.add_argument("--iterations", type=int, default=500)
        sp.add_argument("--lr", type=float, default=3e-2)
        sp.add_argument("--n-sample", type=int, default=8192)
        sp.add_argument("--fit-translation", action="store_true")
        sp.add_argument("--out", required=True)

    c = sub.add_parser("complete", help="fill missing frames or views")
    c.add_argument("--mode", choices=("temporal", "spatial"), required=True)
    fit_args(c)
    c.add_argument("--keep-every", type=int, default=2,
                   help="temporal: observe every k-th frame")
    c.add_argument("--loss", choices=pl.FIT_LOSSES, default="chamfer")
    c.add_argument("--revolutions", type=float, default=1.0,
                   help="spatial: camera turns over the sequence")
    c.set_defaults(func=_cmd_complete)

    pr = sub.add_parser("predict", help="fit a prefix, decode the whole clip")
    fit_args(pr)
    pr.add_argument("--observed", type=int, default=20)
    pr.add_argument("--loss", choices=pl.FIT_LOSSES, default="chamfer")
    pr.set_defaults(func=_cmd_predict)

    e = sub.add_parser("eval", help="reconstruction metrics over a split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--limit", type=int, default=None)
    e.add_argument("--iou-frames", type=int, default=0,
                   help="frames per sequence to score with voxel IoU (0=off)")
    e.add_argument("--iou-resolution", type=int, default=48)
    e.add_argument("--out", required=True)
    e.set_defaults(func=_cmd_eval)

    x = sub.add_parser("export-obj", help="dump a result archive as OBJ frames")
    x.add_argument("--result", required=True)
    x.add_argument("--field", default="verts",
                   help="which vertex entry to export (verts or verts_body)")
    x.add_argument("--out", required=True)
    x.set_defaults(func=_cmd_export_obj)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ArchiveError, ValueError, KeyError, IndexError,
            pl.TrainingDiverged, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
