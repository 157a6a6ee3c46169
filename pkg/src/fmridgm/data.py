"""Subjects, datasets, on-disk format, final-stage preprocessing and sampling.

A dataset on disk is a directory holding ``manifest.json`` plus one CSV
table per subject::

    {
      "format": "fmridgm-dataset",
      "version": 1,
      "n_x": 16,
      "region_names": ["R00", ...],
      "preprocessing": null | {"tr": 3.0, "f_lo": 0.01, "f_hi": 0.1},
      "provenance": {...},
      "subjects": [{"id": "sub-000", "label": 0, "path": "sub-000.csv"}, ...]
    }

``label`` is 0 (control), 1 (patient) or ``null`` for undiagnosed
subjects. Each subject table has T rows and ``n_x`` comma-separated
columns, no header, floats written with 17 significant digits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from ._io import atomic_write_text, format_float
from .numerics import RngStream

DATASET_FORMAT = "fmridgm-dataset"
DATASET_VERSION = 1
VARIANCE_GUARD = 1e-12


class ClassLabel(IntEnum):
    CONTROL = 0
    PATIENT = 1

    @property
    def one_hot(self) -> np.ndarray:
        v = np.zeros(2)
        v[int(self)] = 1.0
        return v

    @property
    def other(self) -> "ClassLabel":
        return ClassLabel(1 - int(self))


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    label: ClassLabel | None
    frames: np.ndarray
    region_names: tuple = ()
    warnings: tuple = ()

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise DatasetError(f"{self.subject_id}: frames must be a non-empty T x n_x matrix")
        bad = np.argwhere(~np.isfinite(frames))
        if bad.size:
            raise DatasetError(f"{self.subject_id}: non-finite value at row {bad[0][0]}, column {bad[0][1]}")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        if self.label is not None:
            object.__setattr__(self, "label", ClassLabel(int(self.label)))
        names = tuple(self.region_names) or tuple(f"R{k:02d}" for k in range(frames.shape[1]))
        if len(names) != frames.shape[1]:
            raise DatasetError(f"{self.subject_id}: {len(names)} region names for {frames.shape[1]} columns")
        object.__setattr__(self, "region_names", names)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class Dataset:
    subjects: tuple
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        subjects = tuple(self.subjects)
        if not subjects:
            raise DatasetError("dataset has no subjects")
        object.__setattr__(self, "subjects", subjects)
        n_x = subjects[0].frames.shape[1]
        seen = set()
        for s in subjects:
            if s.frames.shape[1] != n_x:
                raise DatasetError(f"{s.subject_id}: {s.frames.shape[1]} regions, expected {n_x}")
            if s.subject_id in seen:
                raise DatasetError(f"duplicate subject id {s.subject_id!r}")
            seen.add(s.subject_id)

    @property
    def n_x(self) -> int:
        return self.subjects[0].frames.shape[1]

    @property
    def region_names(self) -> tuple:
        return self.subjects[0].region_names

    @property
    def ids(self) -> list[str]:
        return [s.subject_id for s in self.subjects]

    @property
    def labels(self) -> list:
        return [s.label for s in self.subjects]

    def __len__(self):
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    def subset(self, ids: Sequence[str]) -> "Dataset":
        index = {s.subject_id: s for s in self.subjects}
        return Dataset(tuple(index[i] for i in ids), dict(self.provenance))

    def of_class(self, y) -> list[SubjectRecord]:
        return [s for s in self.subjects if s.label is not None and int(s.label) == int(y)]

    def require_both_classes(self):
        for y in ClassLabel:
            if not self.of_class(y):
                raise DatasetError(f"dataset has no subjects of class {y.name.lower()}")

    def __add__(self, other: "Dataset") -> "Dataset":
        return Dataset(self.subjects + other.subjects, dict(self.provenance))


# --------------------------------------------------------------------------
# files


def save_dataset(dataset: Dataset, directory, preprocessing: dict | None = None):
    """Write the manifest and one table per subject into ``directory``."""
    directory = Path(directory)
    entries = []
    for s in dataset.subjects:
        rel = f"{s.subject_id}.csv"
        lines = [",".join(format_float(v) for v in row) for row in s.frames]
        atomic_write_text(directory / rel, "\n".join(lines) + "\n")
        entries.append({
            "id": s.subject_id,
            "label": None if s.label is None else int(s.label),
            "path": rel,
        })
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "n_x": dataset.n_x,
        "region_names": list(dataset.region_names),
        "preprocessing": preprocessing,
        "provenance": dataset.provenance,
        "subjects": entries,
    }
    atomic_write_text(directory / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return directory / "manifest.json"


def _read_table(path: Path, subject_id: str, n_x: int) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                row = [float(v) for v in line.split(",")]
            except ValueError:
                raise DatasetError(f"{subject_id}: malformed row {lineno} in {path.name}") from None
            if len(row) != n_x:
                raise DatasetError(f"{subject_id}: row {lineno} has {len(row)} columns, expected {n_x}")
            if not all(np.isfinite(row)):
                raise DatasetError(f"{subject_id}: non-finite value in row {lineno}")
            rows.append(row)
    if not rows:
        raise DatasetError(f"{subject_id}: empty table {path.name}")
    return np.array(rows)


def load_dataset(manifest_path) -> Dataset:
    """Parse a manifest (or a directory containing ``manifest.json``)."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"manifest not found: {manifest_path}")
    try:
        meta = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"manifest is not valid JSON: {exc}") from None
    if meta.get("format") != DATASET_FORMAT:
        raise DatasetError(f"unrecognized manifest format {meta.get('format')!r}")
    if meta.get("version") != DATASET_VERSION:
        raise DatasetError(f"unsupported manifest version {meta.get('version')!r}")
    n_x = int(meta["n_x"])
    names = tuple(meta.get("region_names") or ())
    subjects = []
    for entry in meta["subjects"]:
        sid = entry["id"]
        path = manifest_path.parent / entry["path"]
        if not path.exists():
            raise DatasetError(f"{sid}: table not found: {path}")
        frames = _read_table(path, sid, n_x)
        label = entry.get("label")
        subjects.append(SubjectRecord(sid, None if label is None else ClassLabel(label), frames, names))
    return Dataset(tuple(subjects), meta.get("provenance") or {})


def read_preprocessing(manifest_path) -> dict | None:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    return json.loads(manifest_path.read_text(encoding="utf-8")).get("preprocessing")


# --------------------------------------------------------------------------
# preprocessing


def bandpass_normalize(series, tr_seconds: float, f_lo: float = 0.01, f_hi: float = 0.1) -> np.ndarray:
    """Band-limit one ROI series with a DFT mask, then z-score it.

    Every frequency bin strictly outside ``[f_lo, f_hi]`` (DC included) is
    zeroed. A series with no in-band energy comes back as all zeros.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] < 8:
        raise ValueError("series must be one-dimensional with at least 8 samples")
    nyquist = 1.0 / (2.0 * tr_seconds)
    if not 0.0 < f_lo < f_hi < nyquist:
        raise ValueError(f"band must satisfy 0 < f_lo < f_hi < {nyquist:g} Hz")
    return _zscore(_dft_bandpass(x, tr_seconds, f_lo, f_hi))


def _dft_bandpass(x, tr, f_lo, f_hi):
    n = x.shape[-1]
    spec = np.fft.rfft(x, axis=-1)
    freqs = np.fft.rfftfreq(n, d=tr)
    spec[..., (freqs < f_lo) | (freqs > f_hi)] = 0.0
    return np.fft.irfft(spec, n=n, axis=-1)


def _zscore(y):
    y = y - y.mean()
    var = y.var()
    if var < VARIANCE_GUARD:
        return np.zeros_like(y)
    return y / np.sqrt(var)


def preprocess_dataset(dataset: Dataset, tr: float = 3.0, f_lo: float = 0.01, f_hi: float = 0.1) -> Dataset:
    """Bandpass and normalize every region of every subject independently."""
    out = []
    for s in dataset.subjects:
        cols, warn = [], []
        for k in range(dataset.n_x):
            col = bandpass_normalize(s.frames[:, k], tr, f_lo, f_hi)
            if not col.any():
                warn.append(f"region {s.region_names[k]} has no in-band variance; set to zero")
            cols.append(col)
        out.append(replace(s, frames=np.column_stack(cols), warnings=s.warnings + tuple(warn)))
    prov = dict(dataset.provenance)
    prov["preprocessing"] = {"tr": tr, "f_lo": f_lo, "f_hi": f_hi}
    return Dataset(tuple(out), prov)


# --------------------------------------------------------------------------
# synthetic cohort


@dataclass(frozen=True)
class SynthConfig:
    """Ground-truth cohort: linear-Gaussian frames whose class signal sits in a few regions.

    Frames of class y are ``A_y z + mu_y + noise_scale * eps`` with
    ``z ~ N(0, I_latent)``. ``A_1`` and ``mu_1`` equal ``A_0`` and ``mu_0``
    outside ``discriminative_set``; inside it, ``mu_1`` is shifted by
    ``effect_size`` (random sign per region) and, unless
    ``shared_mixing``, the loading rows of ``A_1`` are redrawn.
    """

    n_x: int = 16
    n_subjects: int = 40
    frames: int = 100
    latent_dim: int = 4
    discriminative_set: tuple = (3, 11)
    effect_size: float = 1.0
    mixing_scale: float = 1.0
    noise_scale: float = 0.5
    shared_mixing: bool = False
    seed: int = 0

    def __post_init__(self):
        s = tuple(int(k) for k in self.discriminative_set)
        object.__setattr__(self, "discriminative_set", s)
        if self.n_x < 1 or self.latent_dim < 1:
            raise ValueError("n_x and latent_dim must be >= 1")
        if not s:
            raise ValueError("discriminative_set must name at least one region")
        if len(set(s)) != len(s) or not all(0 <= k < self.n_x for k in s):
            raise ValueError(f"discriminative_set must hold distinct indices in [0, {self.n_x})")
        if self.effect_size < 0:
            raise ValueError("effect_size must be >= 0")
        if self.frames < 1 or self.n_subjects < 1:
            raise ValueError("frames and n_subjects must be >= 1")

    @classmethod
    def null(cls, **kw) -> "SynthConfig":
        """Both classes identically distributed."""
        return cls(effect_size=0.0, shared_mixing=True, **kw)


def synth_generate(cfg: SynthConfig) -> Dataset:
    rng = RngStream(cfg.seed)
    structure, sampling = rng.spawn(0), rng.spawn(1)
    S = list(cfg.discriminative_set)
    L = cfg.latent_dim

    A0 = cfg.mixing_scale * structure.normal((cfg.n_x, L)) / np.sqrt(L)
    mu0 = np.zeros(cfg.n_x)
    A1 = A0.copy()
    redrawn = cfg.mixing_scale * structure.normal((len(S), L)) / np.sqrt(L)
    if not cfg.shared_mixing:
        A1[S] = redrawn
    signs = np.where(structure.uniform(len(S)) < 0.5, -1.0, 1.0)
    mu1 = mu0.copy()
    mu1[S] += cfg.effect_size * signs

    raw, labels = [], []
    for y, (A, mu) in enumerate([(A0, mu0), (A1, mu1)]):
        for _ in range(cfg.n_subjects):
            z = sampling.normal((cfg.frames, L))
            eps = sampling.normal((cfg.frames, cfg.n_x))
            raw.append(z @ A.T + mu + cfg.noise_scale * eps)
            labels.append(y)

    # pooled per-region z-normalization keeps between-class differences
    pooled = np.vstack(raw)
    center, scale = pooled.mean(axis=0), pooled.std(axis=0)
    names = tuple(f"R{k:02d}" for k in range(cfg.n_x))
    subjects = tuple(
        SubjectRecord(f"sub-{i:03d}", ClassLabel(y), (x - center) / scale, names)
        for i, (x, y) in enumerate(zip(raw, labels))
    )
    prov = {
        "kind": "synthetic",
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.__dict__.items()},
        "discriminative_set": S,
        "effect_size": cfg.effect_size,
        "seed": cfg.seed,
    }
    return Dataset(subjects, prov)


# --------------------------------------------------------------------------
# oversampling


class BalancedSampler:
    """Two-level sampler: uniform subject within class, then uniform frame.

    Each batch holds ``batch_frames // 2`` frames of each class, so the
    class imbalance and the frames-per-subject imbalance both vanish in
    expectation.
    """

    def __init__(self, dataset: Dataset, rng: RngStream):
        dataset.require_both_classes()
        self.rng = rng
        self._pools = []
        for y in ClassLabel:
            members = dataset.of_class(y)
            lengths = np.array([s.n_frames for s in members])
            offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
            self._pools.append((np.vstack([s.frames for s in members]), lengths, offsets))

    def draw(self, batch_frames: int):
        """Return ``(frames, labels, subject_index)`` for one batch."""
        if batch_frames < 2:
            raise ValueError("batch_frames must be >= 2")
        half = batch_frames // 2
        xs, ys, subj = [], [], []
        for y, (stack, lengths, offsets) in enumerate(self._pools):
            s = self.rng.integers(len(lengths), size=half)
            t = np.floor(self.rng.uniform(half) * lengths[s]).astype(np.int64)
            xs.append(stack[offsets[s] + t])
            ys.append(np.full(half, y))
            subj.append(s)
        return np.vstack(xs), np.concatenate(ys), np.concatenate(subj)


def balanced_batches(sampler: BalancedSampler, batch_frames: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    if batch_frames < 2:
        raise ValueError("batch_frames must be >= 2")
    while True:
        x, y, _ = sampler.draw(batch_frames)
        yield x, y
