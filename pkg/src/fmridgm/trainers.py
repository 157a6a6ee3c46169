"""Picklable trainer adapters for :func:`fmridgm.evaluation.cross_validate`.

A candidate is a dict of hyperparameter overrides; ``base`` holds the
settings shared by every candidate (e.g. ``max_iters``). ``n_x`` is
taken from the training data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .baselines import MlpHyper, gmm_train, mlp_train
from .dgm import DgmHyper, train
from .numerics import RngStream

MODEL_TYPES = ("dgm", "gmm", "mlp")

# full-size grids for clinical-scale cohorts
FULL_GRIDS = {
    "dgm": [
        {"drop_prob": p, "n_h": nh, "n_z": nz}
        for p in (0.0, 0.5) for nh in (100, 200, 400) for nz in (5, 10, 20, 50, 100) if nh > nz
    ],
    "mlp": [{"drop_prob": p, "n_h": nh} for p in (0.0, 0.5) for nh in (50, 100, 200, 400)],
    "gmm": [{"n": n} for n in (2, 5, 10, 20, 50, 100)],
}

# reduced grids for desk-scale synthetic runs
SMALL_GRIDS = {
    "dgm": [
        {"drop_prob": p, "n_h": nh, "n_z": nz}
        for p in (0.0, 0.5) for nh in (32, 64) for nz in (4, 8)
    ],
    "mlp": [{"drop_prob": p, "n_h": nh} for p in (0.0, 0.5) for nh in (32, 64)],
    "gmm": [{"n": n} for n in (1, 2, 5)],
}


def build_hyper(kind: str, n_x: int, settings: dict):
    if kind == "dgm":
        return DgmHyper(n_x=n_x, **settings)
    if kind == "mlp":
        return MlpHyper(n_x=n_x, **settings)
    raise ValueError(f"no hyperparameter record for model type {kind!r}")


def fit_model(kind: str, dataset, settings: dict, rng: RngStream):
    """Train one model of ``kind``; returns ``(model, train_log_or_None)``."""
    if kind == "dgm":
        return train(dataset, build_hyper(kind, dataset.n_x, settings), rng)
    if kind == "mlp":
        return mlp_train(dataset, build_hyper(kind, dataset.n_x, settings), rng), None
    if kind == "gmm":
        settings = dict(settings)
        n = settings.pop("n", 2)
        return gmm_train(dataset, n, rng, **settings), None
    raise ValueError(f"unknown model type {kind!r}; expected one of {MODEL_TYPES}")


@dataclass(frozen=True)
class Trainer:
    kind: str
    base: dict = field(default_factory=dict)

    def __call__(self, dataset, candidate, seed):
        model, _ = fit_model(self.kind, dataset, {**self.base, **candidate}, RngStream(seed))
        return model
