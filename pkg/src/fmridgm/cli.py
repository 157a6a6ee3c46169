"""Command-line entry point: ``fmridgm <subcommand> [flags]``.

Subcommands::

    synth       write a synthetic ground-truth cohort
    preprocess  bandpass + z-score every ROI series of a dataset
    train       fit a dgm / gmm / mlp model and write a checkpoint
    diagnose    per-subject class scores, posteriors and predictions
    contrib     region contribution weights of a dgm checkpoint
    cv          repeated stratified cross-validation over a grid

Exit codes: 0 success, 1 computational failure, 2 usage or validation
error. ``FMRIDGM_JOBS`` sets the default ``--jobs`` of ``cv``;
``FMRIDGM_TMPDIR`` relocates the temp files used for atomic writes.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from ._io import atomic_write_text, format_float
from .checkpoint import CheckpointError, load_model, save_model
from .data import (
    DatasetError,
    SynthConfig,
    load_dataset,
    preprocess_dataset,
    read_preprocessing,
    save_dataset,
    synth_generate,
)
from .dgm import DgmModel, TrainingError, contribution_weights, frame_series, posterior_from_elbos, top_regions
from .evaluation import CvConfig, confusion, cross_validate, metrics
from .numerics import RngStream
from .trainers import MODEL_TYPES, FULL_GRIDS, SMALL_GRIDS, Trainer, fit_model

log = logging.getLogger("fmridgm")

# flag name -> (type, model types it applies to)
HYPER_FLAGS = {
    "n_z": (int, ("dgm",)),
    "n_h": (int, ("dgm", "mlp")),
    "drop_prob": (float, ("dgm", "mlp")),
    "alpha": (float, ("dgm", "mlp")),
    "max_iters": (int, ("dgm", "mlp")),
    "eval_every": (int, ("dgm", "mlp")),
    "batch_frames": (int, ("dgm", "mlp")),
    "patience": (int, ("dgm", "mlp")),
    "components": (int, ("gmm",)),
}


def _write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def _echo_config(path, args):
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    _write_json(path, cfg)


def _settings(args, kind) -> dict:
    out = {}
    for name, (_, kinds) in HYPER_FLAGS.items():
        val = getattr(args, name, None)
        if val is None:
            continue
        if kind not in kinds:
            raise ValueError(f"--{name.replace('_', '-')} does not apply to model type {kind}")
        out["n" if name == "components" else name] = val
    return out


def _fmt(x: float) -> str:
    return format_float(float(x))


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    planted = tuple(int(k) for k in args.planted.split(",") if k.strip())
    cfg = SynthConfig(
        n_x=args.n_x, n_subjects=args.subjects, frames=args.frames, latent_dim=args.latent_dim,
        discriminative_set=planted, effect_size=args.effect_size, mixing_scale=args.mixing_scale,
        noise_scale=args.noise_scale, shared_mixing=args.shared_mixing, seed=args.seed,
    )
    ds = synth_generate(cfg)
    out = Path(args.out)
    save_dataset(ds, out)
    _echo_config(out / "run_config.json", args)
    print("planted regions: " + ",".join(ds.region_names[k] for k in cfg.discriminative_set))
    return 0


def cmd_preprocess(args):
    ds = load_dataset(args.data)
    if read_preprocessing(args.data):
        log.warning("input dataset is already marked as preprocessed")
    out = preprocess_dataset(ds, args.tr, args.f_lo, args.f_hi)
    dest = Path(args.out)
    save_dataset(out, dest, preprocessing={"tr": args.tr, "f_lo": args.f_lo, "f_hi": args.f_hi})
    _echo_config(dest / "run_config.json", args)
    for s in out:
        for w in s.warnings:
            print(f"{s.subject_id}: {w}", file=sys.stderr)
    return 0


def cmd_train(args):
    ds = load_dataset(args.data)
    ds.require_both_classes()
    settings = _settings(args, args.model)
    model, tlog = fit_model(args.model, ds, settings, RngStream(args.seed))
    meta = {"dataset_subjects": len(ds), "settings": settings}
    if tlog is not None:
        meta.update(best_iteration=tlog.best.iteration, best_train_bacc=tlog.best.train_bacc,
                    stop_reason=tlog.stop_reason)
    out = Path(args.out)
    save_model(out, model, seed=args.seed, meta=meta)
    log_doc = {"model": args.model, "seed": args.seed, "train_log": tlog.to_dict() if tlog else None}
    _write_json(out.with_name(out.name + ".log.json"), log_doc)
    _echo_config(out.with_name(out.name + ".config.json"), args)
    if tlog is not None:
        for r in tlog.records:
            log.info("iter %d  ELBO %.6g  train BACC %.4f", r.iteration, r.dataset_elbo, r.train_bacc)
    return 0


def _class_scores(model, frames):
    from .baselines import GmmPair, MlpClassifier

    if isinstance(model, DgmModel):
        return model.subject_elbos(frames), model.hyper.prior_y
    if isinstance(model, GmmPair):
        return model.subject_logliks(frames), model.prior_y
    if isinstance(model, MlpClassifier):
        q1 = np.clip(model.predict_proba(frames), 1e-12, 1 - 1e-12)
        return np.array([np.sum(np.log1p(-q1)), np.sum(np.log(q1))]), 0.5
    raise TypeError(type(model).__name__)


def _check_dims(model, header, ds):
    n_x = header["hyper"].get("n_x")
    if n_x is not None and n_x != ds.n_x:
        raise ValueError(f"checkpoint expects {n_x} regions, dataset has {ds.n_x}")


def cmd_diagnose(args):
    ds = load_dataset(args.data)
    model, header = load_model(args.checkpoint)
    _check_dims(model, header, ds)
    rows, preds, truths = [], [], []
    for s in ds:
        scores, prior = _class_scores(model, s.frames)
        post = posterior_from_elbos(scores[0], scores[1], prior)
        pred = int(model.diagnose(s.frames))
        rows.append({
            "id": s.subject_id,
            "score_control": float(scores[0]),
            "score_patient": float(scores[1]),
            "posterior_control": float(post[0]),
            "posterior_patient": float(post[1]),
            "prediction": pred,
            "truth": None if s.label is None else int(s.label),
        })
        preds.append(pred)
        truths.append(s.label)
    doc = {"model": header["type"], "subjects": rows}
    if all(t is not None for t in truths):
        cc = confusion(preds, [int(t) for t in truths])
        doc["confusion"] = cc.__dict__
        doc["metrics"] = metrics(cc).as_dict()
    out = Path(args.out)
    _write_json(out, doc)
    cols = ["id", "score_control", "score_patient", "posterior_control", "posterior_patient", "prediction", "truth"]
    _write_csv(out.with_suffix(".csv"), cols, [
        [r["id"], _fmt(r["score_control"]), _fmt(r["score_patient"]), _fmt(r["posterior_control"]),
         _fmt(r["posterior_patient"]), r["prediction"], "" if r["truth"] is None else r["truth"]]
        for r in rows
    ])
    if "metrics" in doc:
        m = doc["metrics"]
        print(f"BACC {m['bacc']:.3f}  MCC {m['mcc']:.3f}  F1 {m['f1']:.3f}  ACC {m['acc']:.3f}")
    return 0


def _region_index(token: str, names) -> int:
    if token in names:
        return names.index(token)
    try:
        k = int(token)
    except ValueError:
        raise ValueError(f"unknown region {token!r}") from None
    if not 0 <= k < len(names):
        raise ValueError(f"region index {k} out of range")
    return k


def cmd_contrib(args):
    ds = load_dataset(args.data)
    model, header = load_model(args.checkpoint)
    if header["type"] != "dgm":
        raise ValueError("contribution weights need a dgm checkpoint")
    _check_dims(model, header, ds)
    names = list(ds.region_names)
    regions = [_region_index(t, names) for t in (args.series or [])]
    w = contribution_weights(model, ds)
    ranked = top_regions(w, names, top=len(names))
    out = Path(args.out)
    _write_csv(out / "weights.csv", ["rank", "index", "region", "weight"],
               [[i + 1, k, n, _fmt(v)] for i, (k, n, v) in enumerate(ranked)])
    _write_csv(out / "top.csv", ["rank", "index", "region", "weight"],
               [[i + 1, k, n, _fmt(v)] for i, (k, n, v) in enumerate(ranked[: args.top])])
    _write_json(out / "contrib.json", {
        "weights": {n: float(v) for n, v in zip(names, w)},
        "top": [{"index": k, "region": n, "weight": v} for k, n, v in ranked[: args.top]],
    })
    subjects = [s for s in ds if s.label is not None and (not args.subject or s.subject_id in args.subject)]
    for k in regions:
        for s in subjects:
            series = frame_series(model, s.frames, s.label, k)
            cols = list(series)
            _write_csv(out / f"series_{s.subject_id}_{names[k]}.csv", ["frame", *cols],
                       [[t, *(_fmt(series[c][t]) for c in cols)] for t in range(s.n_frames)])
    _echo_config(out / "run_config.json", args)
    for i, (k, n, v) in enumerate(ranked[: args.top]):
        print(f"{i + 1:2d}  {n:<24s} {v: .6f}")
    return 0


def _load_grid(spec: str, kind: str) -> list:
    if spec == "small":
        return SMALL_GRIDS[kind]
    if spec == "full":
        return FULL_GRIDS[kind]
    path = Path(spec)
    if not path.exists():
        raise ValueError(f"grid must be 'small', 'full' or a JSON file; {spec!r} not found")
    grid = json.loads(path.read_text())
    if not isinstance(grid, list) or not all(isinstance(c, dict) for c in grid):
        raise ValueError("grid file must hold a JSON list of objects")
    return grid


def cmd_cv(args):
    ds = load_dataset(args.data)
    grid = _load_grid(args.grid, args.model)
    base = _settings(args, args.model)
    cfg = CvConfig(hyper_grid=grid, trials=args.trials, folds=args.folds, base_seed=args.seed)
    report = cross_validate(ds, Trainer(args.model, base), cfg, n_jobs=args.jobs)
    out = Path(args.out)
    atomic_write_text(out / "cv_report.json", report.to_json())
    atomic_write_text(out / "cv_pooled.csv", report.to_csv())
    atomic_write_text(out / "cv_per_trial.csv", report.to_per_trial_csv())
    _echo_config(out / "run_config.json", args)
    failed = [c for c in report.cells.values() if c.error]
    for c in failed[:3]:
        print(f"cell {c.candidate}/{c.trial}/{c.fold} failed:\n{c.error}", file=sys.stderr)
    if report.selected is None:
        print("every candidate failed", file=sys.stderr)
        return 1
    rep = report.pooled[report.selected][1]
    print(f"selected candidate {report.selected}: {json.dumps(grid[report.selected], sort_keys=True)}  "
          f"BACC {rep.bacc:.3f}  MCC {rep.mcc:.3f}  F1 {rep.f1:.3f}")
    return 0


# --------------------------------------------------------------------------
# parser


def _add_hyper_flags(p, kinds):
    for name, (typ, applies) in HYPER_FLAGS.items():
        if set(applies) & set(kinds):
            p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmridgm", description=__doc__.split("\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log training checkpoints")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--n-x", type=int, default=16)
    p.add_argument("--subjects", type=int, default=40, help="subjects per class")
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--latent-dim", type=int, default=4)
    p.add_argument("--planted", default="3,11", help="comma-separated region indices")
    p.add_argument("--effect-size", type=float, default=1.0)
    p.add_argument("--mixing-scale", type=float, default=1.0)
    p.add_argument("--noise-scale", type=float, default=0.5)
    p.add_argument("--shared-mixing", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", parents=[common], help="bandpass and normalize ROI series")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tr", type=float, default=3.0, help="repetition time in seconds")
    p.add_argument("--f-lo", type=float, default=0.01)
    p.add_argument("--f-hi", type=float, default=0.1)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--model", choices=MODEL_TYPES, default="dgm")
    p.add_argument("--seed", type=int, default=0)
    _add_hyper_flags(p, MODEL_TYPES)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("diagnose", parents=[common], help="diagnose subjects with a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="report path (.json; a .csv mirror is written alongside)")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("contrib", parents=[common], help="region contribution weights")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--series", nargs="*", help="regions (name or index) for per-frame series")
    p.add_argument("--subject", nargs="*", help="restrict per-frame series to these subject ids")
    p.set_defaults(func=cmd_contrib)

    p = sub.add_parser("cv", parents=[common], help="repeated stratified cross-validation")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--model", choices=MODEL_TYPES, default="dgm")
    p.add_argument("--grid", default="small", help="'small', 'full' or a JSON file")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=int(os.environ.get("FMRIDGM_JOBS", "1")))
    _add_hyper_flags(p, MODEL_TYPES)
    p.set_defaults(func=cmd_cv)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TrainingError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, CheckpointError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
