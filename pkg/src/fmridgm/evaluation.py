"""Diagnostic metrics and the repeated stratified cross-validation protocol."""

from __future__ import annotations

import csv
import io
import json
import math
import traceback
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .data import Dataset, SubjectRecord
from .numerics import RngStream

METRIC_NAMES = ("acc", "sen", "spec", "ppv", "npv", "bacc", "mcc", "f1")


@dataclass(frozen=True)
class ConfusionCounts:
    """Subject-level tallies with patient (1) as the positive class."""

    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class MetricReport:
    acc: float
    sen: float
    spec: float
    ppv: float
    npv: float
    bacc: float
    mcc: float
    f1: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def confusion(predictions: Sequence[int], truths: Sequence[int]) -> ConfusionCounts:
    p = np.asarray([int(v) for v in predictions])
    t = np.asarray([int(v) for v in truths])
    if p.shape != t.shape:
        raise ValueError(f"{len(p)} predictions for {len(t)} truths")
    if p.size == 0:
        raise ValueError("nothing to tally")
    return ConfusionCounts(
        tp=int(np.sum((p == 1) & (t == 1))),
        tn=int(np.sum((p == 0) & (t == 0))),
        fp=int(np.sum((p == 1) & (t == 0))),
        fn=int(np.sum((p == 0) & (t == 1))),
    )


def _ratio(num, den):
    return num / den if den else 0.0


def metrics(c: ConfusionCounts) -> MetricReport:
    """All eight measures. Undefined ratios resolve to 0.

    MCC uses the square root of the four-factor product in the
    denominator, and is 0 when any factor vanishes (e.g. a constant
    predictor).
    """
    if c.total <= 0:
        raise ValueError("no subjects tallied")
    tp, tn, fp, fn = c.tp, c.tn, c.fp, c.fn
    sen = _ratio(tp, tp + fn)
    spec = _ratio(tn, tn + fp)
    ppv = _ratio(tp, tp + fp)
    npv = _ratio(tn, tn + fn)
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = (tp * tn - fp * fn) / math.sqrt(den) if den else 0.0
    f1 = 2.0 * sen * ppv / (sen + ppv) if sen + ppv > 0 else 0.0
    return MetricReport(
        acc=(tp + tn) / c.total, sen=sen, spec=spec, ppv=ppv, npv=npv,
        bacc=(sen + spec) / 2.0, mcc=mcc, f1=f1,
    )


def balanced_accuracy(predictions, truths) -> float:
    return metrics(confusion(predictions, truths)).bacc


# --------------------------------------------------------------------------
# folds


def stratified_kfold(dataset, folds: int, seed) -> list[tuple[list[str], list[str]]]:
    """Partition subjects into ``folds`` test sets with class proportions preserved.

    Subjects of each class are shuffled and dealt round-robin, continuing
    the deal across classes, so fold sizes differ by at most one overall
    and per class. ``seed`` is an int or a tuple of ints.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    key = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    rng = RngStream(key[0], key[1:])
    assignment = {}
    pos = 0
    for y in (0, 1):
        ids = [s.subject_id for s in dataset.subjects if s.label is not None and int(s.label) == y]
        if len(ids) < folds:
            raise ValueError(f"class {y} has {len(ids)} subjects, fewer than {folds} folds")
        for j in rng.permutation(len(ids)):
            assignment[ids[j]] = pos % folds
            pos += 1
    ordered = [s.subject_id for s in dataset.subjects if s.subject_id in assignment]
    return [
        ([i for i in ordered if assignment[i] != f], [i for i in ordered if assignment[i] == f])
        for f in range(folds)
    ]


# --------------------------------------------------------------------------
# cross-validation


@dataclass
class CvConfig:
    hyper_grid: list
    trials: int = 10
    folds: int = 10
    stratified: bool = True
    base_seed: int = 0

    def __post_init__(self):
        if self.folds < 2 or self.trials < 1:
            raise ValueError("folds >= 2 and trials >= 1 required")
        if not self.hyper_grid:
            raise ValueError("hyper_grid is empty")


@dataclass
class CellResult:
    candidate: int
    trial: int
    fold: int
    test_ids: list
    predictions: list
    truths: list
    error: str | None = None


@dataclass
class CvReport:
    candidates: list
    cells: dict = field(default_factory=dict)
    pooled: dict = field(default_factory=dict)
    per_trial: dict = field(default_factory=dict)
    per_trial_mean: dict = field(default_factory=dict)
    selected: int | None = None

    def to_dict(self) -> dict:
        cells = [
            {
                "candidate": c.candidate, "trial": c.trial, "fold": c.fold,
                "error": c.error,
                "subjects": [
                    {"id": i, "prediction": p, "truth": t}
                    for i, p, t in zip(c.test_ids, c.predictions, c.truths)
                ],
            }
            for _, c in sorted(self.cells.items())
        ]
        aggregates = []
        for ci, cand in enumerate(self.candidates):
            aggregates.append({
                "candidate": ci,
                "hyper": cand,
                "disqualified": ci not in self.pooled,
                "pooled": self.pooled[ci][1].as_dict() if ci in self.pooled else None,
                "confusion": asdict(self.pooled[ci][0]) if ci in self.pooled else None,
                "per_trial_mean": self.per_trial_mean.get(ci),
                "per_trial": {str(t): m.as_dict() for t, m in self.per_trial.get(ci, {}).items()},
            })
        return {"format": "fmridgm-cv-report", "version": 1, "selected": self.selected,
                "aggregates": aggregates, "cells": cells}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, default=_jsonable) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["candidate", "selected", "disqualified", "hyper", *METRIC_NAMES, "tp", "tn", "fp", "fn"])
        for ci, cand in enumerate(self.candidates):
            if ci in self.pooled:
                cc, rep = self.pooled[ci]
                vals = ["%.6f" % getattr(rep, m) for m in METRIC_NAMES] + [cc.tp, cc.tn, cc.fp, cc.fn]
            else:
                vals = [""] * (len(METRIC_NAMES) + 4)
            w.writerow([ci, int(ci == self.selected), int(ci not in self.pooled),
                        json.dumps(cand, sort_keys=True, default=_jsonable), *vals])
        return buf.getvalue()

    def to_per_trial_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["candidate", "trial", *METRIC_NAMES])
        for ci in sorted(self.per_trial):
            for t, rep in self.per_trial[ci].items():
                w.writerow([ci, t, *("%.6f" % getattr(rep, m) for m in METRIC_NAMES)])
        return buf.getvalue()


def _jsonable(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


class AccessRecorder:
    """Counts reads of subjects' frames, keyed by the current CV cell and phase.

    Wrap a dataset with :meth:`watch` and pass the recorder to
    :func:`cross_validate`; afterwards :meth:`leaks` lists every read of
    a held-out subject made while its own fold was training.
    """

    def __init__(self):
        self.counts = Counter()
        self.cell = None
        self.phase = "idle"
        self.held_out = frozenset()

    def begin(self, cell, phase, held_out=()):
        self.cell, self.phase, self.held_out = cell, phase, frozenset(held_out)

    def touch(self, subject_id):
        self.counts[(self.cell, self.phase, subject_id)] += 1

    def watch(self, dataset):
        return Dataset(tuple(_WatchedSubject.wrap(s, self) for s in dataset.subjects), dict(dataset.provenance))

    def leaks(self, held_out_by_cell: dict) -> list:
        return [
            (cell, sid, n) for (cell, phase, sid), n in self.counts.items()
            if phase == "train" and sid in held_out_by_cell.get(cell, ())
        ]


class _WatchedSubject(SubjectRecord):
    @classmethod
    def wrap(cls, s, recorder):
        w = cls(s.subject_id, s.label, s.frames, s.region_names, s.warnings)
        object.__setattr__(w, "_recorder", recorder)
        return w

    def __getattribute__(self, name):
        if name == "frames":
            rec = object.__getattribute__(self, "__dict__").get("_recorder")
            if rec is not None:
                rec.touch(object.__getattribute__(self, "subject_id"))
        return object.__getattribute__(self, name)


def _cell_seed(base_seed, trial, fold) -> int:
    return int(np.random.SeedSequence([base_seed, trial, fold]).generate_state(1, np.uint64)[0] >> 1)


def _run_cell(trainer, dataset, candidate, ci, t, f, train_ids, test_ids, seed, recorder=None):
    cell = (ci, t, f)
    try:
        if recorder is not None:
            recorder.begin(cell, "split", test_ids)
        train_set = dataset.subset(train_ids)
        test_set = dataset.subset(test_ids)
        if recorder is not None:
            recorder.begin(cell, "train", test_ids)
        model = trainer(train_set, candidate, seed)
        if recorder is not None:
            recorder.begin(cell, "test", test_ids)
        preds = [int(model.diagnose(s.frames)) for s in test_set]
        truths = [int(s.label) for s in test_set]
        return CellResult(ci, t, f, list(test_ids), preds, truths)
    except Exception:
        return CellResult(ci, t, f, list(test_ids), [], [], traceback.format_exc(limit=3))
    finally:
        if recorder is not None:
            recorder.begin(None, "idle")


def cross_validate(
    dataset,
    trainer: Callable[[Any, Any, int], Any],
    cfg: CvConfig,
    recorder: AccessRecorder | None = None,
    n_jobs: int = 1,
) -> CvReport:
    """Repeated k-fold evaluation of every hyperparameter candidate.

    ``trainer(train_dataset, candidate, seed)`` must return an object with
    ``diagnose(frames) -> label``. Each trial draws fresh folds, shared by
    all candidates. Diagnoses are pooled over every trial and fold into
    one confusion table per candidate; the candidate with the highest
    pooled BACC is selected (first on ties). A candidate with any failed
    cell is disqualified.
    """
    if not cfg.stratified:
        raise NotImplementedError("only stratified folds are supported")
    jobs = []
    for t in range(cfg.trials):
        splits = stratified_kfold(dataset, cfg.folds, (cfg.base_seed, t))
        for f, (train_ids, test_ids) in enumerate(splits):
            seed = _cell_seed(cfg.base_seed, t, f)
            for ci, cand in enumerate(cfg.hyper_grid):
                jobs.append((ci, t, f, train_ids, test_ids, seed, cand))

    report = CvReport(candidates=list(cfg.hyper_grid))
    if n_jobs > 1 and recorder is None:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            futures = [
                pool.submit(_run_cell, trainer, dataset, cand, ci, t, f, tr, te, seed)
                for ci, t, f, tr, te, seed, cand in jobs
            ]
            results = [fu.result() for fu in futures]
    else:
        results = [
            _run_cell(trainer, dataset, cand, ci, t, f, tr, te, seed, recorder)
            for ci, t, f, tr, te, seed, cand in jobs
        ]
    for r in results:
        report.cells[(r.candidate, r.trial, r.fold)] = r

    for ci in range(len(cfg.hyper_grid)):
        mine = [r for k, r in sorted(report.cells.items()) if k[0] == ci]
        if any(r.error for r in mine):
            continue
        pooled = ConfusionCounts()
        per_trial = {}
        for r in mine:
            cc = confusion(r.predictions, r.truths)
            pooled = pooled + cc
            per_trial[r.trial] = per_trial.get(r.trial, ConfusionCounts()) + cc
        report.pooled[ci] = (pooled, metrics(pooled))
        report.per_trial[ci] = {t: metrics(c) for t, c in sorted(per_trial.items())}
        trial_reports = [m.as_dict() for m in report.per_trial[ci].values()]
        report.per_trial_mean[ci] = {m: float(np.mean([tr[m] for tr in trial_reports])) for m in METRIC_NAMES}
    if report.pooled:
        report.selected = max(report.pooled, key=lambda ci: (report.pooled[ci][1].bacc, -ci))
    return report
