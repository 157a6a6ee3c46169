"""Class-conditional deep generative model of ROI frames.

Each frame ``x`` of a subject with class ``y`` is modelled as
``p(x | z, y) p(z)`` with a standard-normal prior on ``z``. An encoder
network gives a diagonal-Gaussian posterior ``q(z | x, y)``; a decoder
gives the diagonal-Gaussian likelihood ``p(x | z, y)``. Training maximizes
the frame evidence lower bound (ELBO) summed over all frames of all
subjects. A subject is diagnosed by comparing its summed ELBO under each
class and applying Bayes' rule.

Architecture (``u_h`` hidden layers, each affine -> layer norm -> ReLU):

* encoder: ``x`` (with input dropout) enters the first hidden layer, the
  one-hot label is concatenated onto the input of the last hidden layer;
  the output layer has ``2 n_z`` identity units split into the posterior
  mean and log-variance.
* decoder: ``[z, one_hot(y)]`` enters the first hidden layer; the output
  layer has ``2 n_x`` units split into the likelihood mean and
  log-variance. The decoder variance is floored at ``var_floor``.

Evaluation (ELBOs for diagnosis, reconstruction errors) always plugs in
the posterior mean for ``z``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ClassLabel, Dataset, BalancedSampler
from .evaluation import balanced_accuracy
from .numerics import (
    LOG_2PI,
    AdamState,
    GaussianPair,
    LayerSpec,
    RngStream,
    adam_step,
    dropout_mask,
    flatten_params,
    gaussian_log_pdf_terms,
    init_params,
    mlp_backward,
    mlp_forward,
    unflatten_params,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class DgmHyper:
    n_x: int
    n_z: int = 5
    n_h: int = 100
    u_h: int = 2
    drop_prob: float = 0.0
    alpha: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_iters: int = 20_000
    eval_every: int = 100
    batch_frames: int = 128
    prior_y: float = 0.5
    patience: int = 2_000
    var_floor: float = 1e-6
    init_std: float = 0.02
    # once training BACC hits 1.0 no later checkpoint can replace the
    # earliest-best snapshot, so the remaining iterations are skipped
    stop_at_perfect: bool = True

    def __post_init__(self):
        if self.n_x < 1 or self.n_z < 1:
            raise ValueError("n_x and n_z must be >= 1")
        if self.n_h <= self.n_z:
            raise ValueError(f"n_h ({self.n_h}) must exceed n_z ({self.n_z})")
        if self.u_h < 1:
            raise ValueError("u_h must be >= 1")
        if not 0.0 <= self.drop_prob < 1.0:
            raise ValueError("drop_prob must lie in [0, 1)")
        if not 0.0 <= self.prior_y <= 1.0:
            raise ValueError("prior_y must lie in [0, 1]")
        if self.batch_frames < 2 or self.eval_every < 1 or self.max_iters < 1:
            raise ValueError("batch_frames >= 2, eval_every >= 1 and max_iters >= 1 required")


def encoder_layers(h: DgmHyper) -> list[LayerSpec]:
    dims = [h.n_x] + [h.n_h] * h.u_h
    layers = []
    for i in range(h.u_h):
        extra = 2 if i == h.u_h - 1 else 0
        layers.append(LayerSpec(dims[i] + extra, h.n_h, True, "relu"))
    layers.append(LayerSpec(h.n_h, 2 * h.n_z, False, "identity"))
    return layers


def decoder_layers(h: DgmHyper) -> list[LayerSpec]:
    layers = [LayerSpec(h.n_z + 2, h.n_h, True, "relu")]
    layers += [LayerSpec(h.n_h, h.n_h, True, "relu") for _ in range(h.u_h - 1)]
    layers.append(LayerSpec(h.n_h, 2 * h.n_x, False, "identity"))
    return layers


@dataclass
class DgmModel:
    hyper: DgmHyper
    encoder: list
    decoder: list

    @classmethod
    def initialize(cls, hyper: DgmHyper, rng: RngStream) -> "DgmModel":
        enc = init_params(encoder_layers(hyper), rng, hyper.init_std)
        dec = init_params(decoder_layers(hyper), rng, hyper.init_std)
        return cls(hyper, enc, dec)

    @classmethod
    def zeros(cls, hyper: DgmHyper) -> "DgmModel":
        def zero(net):
            return [{k: np.zeros_like(v) for k, v in layer.items()} for layer in net]
        m = cls.initialize(hyper, RngStream(0))
        return cls(hyper, zero(m.encoder), zero(m.decoder))

    def flat(self) -> dict[str, np.ndarray]:
        return flatten_params({"encoder": self.encoder, "decoder": self.decoder})

    @classmethod
    def from_flat(cls, hyper: DgmHyper, flat) -> "DgmModel":
        enc = unflatten_params(flat, "encoder", hyper.u_h + 1)
        dec = unflatten_params(flat, "decoder", hyper.u_h + 1)
        return cls(hyper, enc, dec)

    def copy(self) -> "DgmModel":
        return DgmModel.from_flat(self.hyper, {k: v.copy() for k, v in self.flat().items()})

    # convenience hooks used by the cross-validation harness
    def diagnose(self, frames) -> ClassLabel:
        return diagnose(self, frames, self.hyper.prior_y)

    def posterior(self, frames) -> np.ndarray:
        return posterior(self, frames, self.hyper.prior_y)

    def subject_elbos(self, frames) -> np.ndarray:
        return np.array([subject_elbo(self, frames, y) for y in ClassLabel])


def _one_hots(y, batch: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 0:
        y = np.full(batch, int(y))
    if y.shape != (batch,) or not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1, one per frame")
    return np.eye(2)[y.astype(np.int64)]


def _as_batch(x, dim: int, what: str) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"{what} must have {dim} columns, got shape {x.shape}")
    return x


def _squeeze(g: GaussianPair, single: bool) -> GaussianPair:
    return GaussianPair(g.mean[0], g.variance[0]) if single else g


def _encoder_aux(h: DgmHyper, onehot):
    aux = [None] * (h.u_h + 1)
    aux[h.u_h - 1] = onehot
    return aux


def _encoder_out(model, x, onehot, mode="eval", mask=None):
    h = model.hyper
    out, cache = mlp_forward(encoder_layers(h), model.encoder, x, _encoder_aux(h, onehot), mask, mode)
    return out[:, : h.n_z], out[:, h.n_z :], cache


def _decoder_out(model, z, onehot):
    h = model.hyper
    out, cache = mlp_forward(decoder_layers(h), model.decoder, np.hstack([z, onehot]))
    return out[:, : h.n_x], out[:, h.n_x :], cache


def encode(model: DgmModel, x, y, mode: str = "eval", mask=None) -> GaussianPair:
    """Posterior ``q(z | x, y)``. ``x`` is one frame or a ``(T, n_x)`` batch."""
    single = np.ndim(x) == 1
    x = _as_batch(x, model.hyper.n_x, "x")
    mean, logvar, _ = _encoder_out(model, x, _one_hots(y, len(x)), mode, mask)
    return _squeeze(GaussianPair(mean, np.exp(logvar)), single)


def decode(model: DgmModel, z, y) -> GaussianPair:
    """Likelihood ``p(x | z, y)`` over the ``n_x`` regions."""
    single = np.ndim(z) == 1
    z = _as_batch(z, model.hyper.n_z, "z")
    mean, logvar, _ = _decoder_out(model, z, _one_hots(y, len(z)))
    var = np.maximum(np.exp(logvar), model.hyper.var_floor)
    return _squeeze(GaussianPair(mean, var), single)


def _map_terms(model, frames, y):
    """KL per frame and per-region log-likelihood terms with ``z`` at the posterior mean."""
    frames = _as_batch(frames, model.hyper.n_x, "frames")
    q = encode(model, frames, y)
    p = decode(model, q.mean, y)
    kl = 0.5 * np.sum(q.variance + q.mean**2 - 1.0 - np.log(q.variance), axis=1)
    return kl, gaussian_log_pdf_terms(frames, p.mean, p.variance)


def frame_elbo(model: DgmModel, x, y, z_mode: str = "map", rng: RngStream | None = None):
    """Frame ELBO: ``-KL(q || p(z)) + log p(x | z, y)``.

    ``z_mode="map"`` uses the posterior mean; ``"sample"`` draws one
    reparameterized ``z`` from ``rng``. Returns a scalar for one frame,
    a vector for a batch.
    """
    single = np.ndim(x) == 1
    if z_mode == "map":
        kl, terms = _map_terms(model, x, y)
        out = -kl + terms.sum(axis=1)
    elif z_mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs an rng")
        xb = _as_batch(x, model.hyper.n_x, "x")
        q = encode(model, xb, y)
        z = q.mean + np.sqrt(q.variance) * rng.normal(q.mean.shape)
        p = decode(model, z, y)
        kl = 0.5 * np.sum(q.variance + q.mean**2 - 1.0 - np.log(q.variance), axis=1)
        out = -kl + gaussian_log_pdf_terms(xb, p.mean, p.variance).sum(axis=1)
    else:
        raise ValueError(f"z_mode must be 'map' or 'sample', got {z_mode!r}")
    return float(out[0]) if single else out


def subject_elbo(model: DgmModel, frames, y) -> float:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ValueError("subject needs at least one frame")
    return float(np.sum(frame_elbo(model, frames, y)))


def dataset_elbo(model: DgmModel, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    return float(sum(subject_elbo(model, s.frames, s.label) for s in dataset))


def posterior_from_elbos(elbo_control: float, elbo_patient: float, prior_y: float = 0.5) -> np.ndarray:
    """``p(y | frames)`` proportional to ``p(y) exp(L(frames; y))``, in log space."""
    if not 0.0 <= prior_y <= 1.0:
        raise ValueError("prior_y must lie in [0, 1]")
    with np.errstate(divide="ignore"):
        logits = np.log([1.0 - prior_y, prior_y]) + np.array([elbo_control, elbo_patient], dtype=np.float64)
    logits -= logits.max()
    p = np.exp(logits)
    return p / p.sum()


def diagnose_from_elbos(elbo_control: float, elbo_patient: float, prior_y: float = 0.5) -> ClassLabel:
    p = posterior_from_elbos(elbo_control, elbo_patient, prior_y)
    return ClassLabel.PATIENT if p[1] > p[0] else ClassLabel.CONTROL


def posterior(model: DgmModel, frames, prior_y: float = 0.5) -> np.ndarray:
    return posterior_from_elbos(*model.subject_elbos(frames), prior_y)


def diagnose(model: DgmModel, frames, prior_y: float = 0.5) -> ClassLabel:
    """Most probable class; an exact tie goes to control."""
    return diagnose_from_elbos(*model.subject_elbos(frames), prior_y)


# --------------------------------------------------------------------------
# training


def negative_elbo_and_grads(model: DgmModel, x, y, eps, mask=None):
    """Minibatch mean of the negative frame ELBO and its exact gradients.

    ``eps`` is the standard-normal noise of the reparameterized ``z``
    (one row per frame); ``mask`` is an optional input-dropout mask.
    Returns ``(loss, encoder_grads, decoder_grads)``.
    """
    h = model.hyper
    x = _as_batch(x, h.n_x, "x")
    B = len(x)
    onehot = _one_hots(y, B)
    mode = "train" if mask is not None else "eval"
    mu_z, logvar_z, ecache = _encoder_out(model, x, onehot, mode, mask)
    var_z = np.exp(logvar_z)
    std_z = np.exp(0.5 * logvar_z)
    z = mu_z + std_z * eps
    mu_x, logvar_x, dcache = _decoder_out(model, z, onehot)
    raw_var = np.exp(logvar_x)
    floored = raw_var < h.var_floor
    var_x = np.where(floored, h.var_floor, raw_var)
    r = x - mu_x
    nll = np.sum(0.5 * LOG_2PI + 0.5 * np.log(var_x) + r * r / (2.0 * var_x), axis=1)
    kl = 0.5 * np.sum(var_z + mu_z**2 - 1.0 - logvar_z, axis=1)
    loss = float(np.mean(nll + kl))

    d_mu_x = -r / var_x / B
    d_logvar_x = np.where(floored, 0.0, (0.5 - r * r / (2.0 * var_x)) / B)
    dec_grads, d_dec_in = mlp_backward(dcache, np.hstack([d_mu_x, d_logvar_x]))
    dz = d_dec_in[:, : h.n_z]
    d_mu_z = dz + mu_z / B
    d_logvar_z = dz * 0.5 * std_z * eps + 0.5 * (var_z - 1.0) / B
    enc_grads, _ = mlp_backward(ecache, np.hstack([d_mu_z, d_logvar_z]))
    return loss, enc_grads, dec_grads


@dataclass(frozen=True)
class Checkpoint:
    iteration: int
    dataset_elbo: float
    train_bacc: float
    snapshot_id: int


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    best_snapshot: int = -1
    stop_reason: str = ""
    losses: list = field(default_factory=list)

    @property
    def best(self) -> Checkpoint:
        return self.records[self.best_snapshot]

    def to_dict(self) -> dict:
        return {
            "best_snapshot": self.best_snapshot,
            "stop_reason": self.stop_reason,
            "checkpoints": [r.__dict__ for r in self.records],
        }


def _training_elbos(model, stacked, bounds):
    """Per-subject ELBO under each class for a stacked frame matrix."""
    per_class = []
    for y in ClassLabel:
        per_frame = frame_elbo(model, stacked, y)
        per_class.append(np.add.reduceat(per_frame, bounds))
    return np.column_stack(per_class)


def train(dataset: Dataset, hyper: DgmHyper, rng: RngStream) -> tuple[DgmModel, TrainLog]:
    """Fit encoder and decoder jointly by Adam on balanced minibatches.

    Every ``eval_every`` iterations the training subjects are diagnosed;
    the returned model is the snapshot with the best training balanced
    accuracy (earliest on ties). Training ends at ``max_iters``, when the
    dataset ELBO has not improved for ``patience`` iterations, or at a
    perfect training accuracy when ``stop_at_perfect`` is set.
    """
    dataset.require_both_classes()
    if dataset.n_x != hyper.n_x:
        raise ValueError(f"dataset has {dataset.n_x} regions, hyper.n_x = {hyper.n_x}")
    model = DgmModel.initialize(hyper, rng.spawn(0))
    sampler = BalancedSampler(dataset, rng.spawn(1))
    noise, drop = rng.spawn(2), rng.spawn(3)

    labelled = [s for s in dataset if s.label is not None]
    stacked = np.vstack([s.frames for s in labelled])
    bounds = np.concatenate([[0], np.cumsum([s.n_frames for s in labelled])[:-1]])
    truths = np.array([int(s.label) for s in labelled])

    names = list(model.flat())
    params = list(model.flat().values())
    state = AdamState.for_params(params, alpha=hyper.alpha, beta1=hyper.beta1,
                                 beta2=hyper.beta2, epsilon=hyper.adam_eps)
    tlog = TrainLog()
    best_params, best_bacc = None, -np.inf
    best_smoothed, best_smoothed_iter = -np.inf, 0
    recent = []

    for it in range(1, hyper.max_iters + 1):
        x, y, _ = sampler.draw(hyper.batch_frames)
        eps = noise.normal((len(x), hyper.n_z))
        mask = dropout_mask(x.shape, hyper.drop_prob, drop) if hyper.drop_prob > 0 else None
        loss, eg, dg = negative_elbo_and_grads(model, x, y, eps, mask)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} at iteration {it}")
        grads = list(flatten_params({"encoder": eg, "decoder": dg}).values())
        params, state = adam_step(params, grads, state)
        flat = dict(zip(names, params))
        model = DgmModel.from_flat(hyper, flat)
        tlog.losses.append(loss)

        if it % hyper.eval_every and it != hyper.max_iters:
            continue
        elbos = _training_elbos(model, stacked, bounds)
        preds = np.array([int(diagnose_from_elbos(a, b, hyper.prior_y)) for a, b in elbos])
        bacc = balanced_accuracy(preds, truths)
        total = float(elbos[np.arange(len(truths)), truths].sum())
        if not np.isfinite(total):
            raise TrainingError(f"non-finite dataset ELBO at iteration {it}")
        sid = len(tlog.records)
        tlog.records.append(Checkpoint(it, total, bacc, sid))
        if bacc > best_bacc:
            best_bacc, best_params = bacc, [p.copy() for p in params]
            tlog.best_snapshot = sid
        log.debug("iter %d  elbo %.3f  train BACC %.3f", it, total, bacc)

        recent = (recent + [total])[-5:]
        smoothed = float(np.mean(recent))
        if smoothed > best_smoothed:
            best_smoothed, best_smoothed_iter = smoothed, it
        if hyper.stop_at_perfect and bacc >= 1.0:
            tlog.stop_reason = "perfect training accuracy"
            break
        if it - best_smoothed_iter >= hyper.patience:
            tlog.stop_reason = "ELBO plateau"
            break
    else:
        tlog.stop_reason = "max_iters"

    return DgmModel.from_flat(hyper, dict(zip(names, best_params))), tlog


# --------------------------------------------------------------------------
# attribution


def region_recon_errors(model: DgmModel, frames, y) -> np.ndarray:
    """``(T, n_x)`` negated per-region log-likelihoods with ``z`` at the posterior mean."""
    _, terms = _map_terms(model, frames, y)
    return -terms


def region_recon_error(model: DgmModel, x, y, k: int) -> float:
    if not 0 <= k < model.hyper.n_x:
        raise IndexError(f"region index {k} out of range [0, {model.hyper.n_x})")
    return float(region_recon_errors(model, np.asarray(x)[None, :], y)[0, k])


def contribution_frames(model: DgmModel, frames, y_true) -> np.ndarray:
    """``(T, n_x)`` error under the wrong label minus error under the true label."""
    y_true = ClassLabel(int(y_true))
    return region_recon_errors(model, frames, y_true.other) - region_recon_errors(model, frames, y_true)


def contribution_frame(model: DgmModel, x, y_true, k: int) -> float:
    if not 0 <= k < model.hyper.n_x:
        raise IndexError(f"region index {k} out of range [0, {model.hyper.n_x})")
    return float(contribution_frames(model, np.asarray(x)[None, :], y_true)[0, k])


def contribution_weights(model: DgmModel, dataset: Dataset) -> np.ndarray:
    """Per-region contribution weight, averaged frame -> subject -> class.

    The nested means give every class equal weight regardless of how
    many subjects it has, and every subject equal weight regardless of
    its frame count.
    """
    per_class = []
    for y in ClassLabel:
        members = dataset.of_class(y)
        if not members:
            raise ValueError(f"no subjects of class {y.name.lower()}")
        per_class.append(np.mean([contribution_frames(model, s.frames, y).mean(axis=0) for s in members], axis=0))
    return np.mean(per_class, axis=0)


def contribution_region(model: DgmModel, dataset: Dataset, k: int) -> float:
    if not 0 <= k < model.hyper.n_x:
        raise IndexError(f"region index {k} out of range [0, {model.hyper.n_x})")
    return float(contribution_weights(model, dataset)[k])


def frame_series(model: DgmModel, frames, y_true, k: int) -> dict[str, np.ndarray]:
    """Per-frame traces for one region: signal, reconstructions under both labels, errors, weight."""
    y_true = ClassLabel(int(y_true))
    frames = _as_batch(frames, model.hyper.n_x, "frames")
    out = {"signal": frames[:, k]}
    for tag, y in (("correct", y_true), ("incorrect", y_true.other)):
        p = decode(model, encode(model, frames, y).mean, y)
        out[f"mean_{tag}"] = p.mean[:, k]
        out[f"std_{tag}"] = np.sqrt(p.variance[:, k])
        out[f"error_{tag}"] = region_recon_errors(model, frames, y)[:, k]
    out["weight"] = out["error_incorrect"] - out["error_correct"]
    return out


def top_regions(weights: Sequence[float], names: Sequence[str], top: int = 10) -> list[tuple[int, str, float]]:
    """``(index, name, weight)`` rows sorted by weight, largest first."""
    order = np.argsort(-np.asarray(weights), kind="stable")[:top]
    return [(int(k), names[k], float(weights[k])) for k in order]
