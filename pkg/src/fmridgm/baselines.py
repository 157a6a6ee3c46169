"""Frame-wise comparison models.

* A pair of full-covariance Gaussian mixtures, one per class, fitted by EM
  and used as a generative classifier through the same Bayes-rule
  diagnosis as the DGM.
* A discriminative MLP giving ``q(y=1 | x)`` per frame; a subject is
  diagnosed by summing frame log-probabilities under each class.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.special import logsumexp

from .data import BalancedSampler, ClassLabel, Dataset
from .dgm import TrainingError, diagnose_from_elbos
from .evaluation import balanced_accuracy
from .numerics import (
    LOG_2PI,
    AdamState,
    LayerSpec,
    RngStream,
    adam_step,
    dropout_mask,
    flatten_params,
    init_params,
    mlp_backward,
    mlp_forward,
    unflatten_params,
)

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Gaussian mixtures


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    loglik_trace: list = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.covariances = np.asarray(self.covariances, dtype=np.float64).reshape(
            len(self.weights), self.means.shape[1], self.means.shape[1]
        )
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must sum to 1")
        self._chol = np.array([cholesky(c, lower=True) for c in self.covariances])

    @property
    def n(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component_logpdf(self, X) -> np.ndarray:
        """``(N, n)`` log N(x; mean_j, cov_j)."""
        X = np.atleast_2d(X)
        out = np.empty((X.shape[0], self.n))
        for j in range(self.n):
            L = self._chol[j]
            sol = solve_triangular(L, (X - self.means[j]).T, lower=True)
            logdet = 2.0 * np.sum(np.log(np.diag(L)))
            out[:, j] = -0.5 * (self.dim * LOG_2PI + logdet + np.sum(sol * sol, axis=0))
        return out


def _kmeanspp(X, n, rng: RngStream):
    centers = [X[rng.integers(len(X))]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, n):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(len(X))
        else:
            idx = int(np.searchsorted(np.cumsum(d2) / total, rng.uniform(1)[0]))
            idx = min(idx, len(X) - 1)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def gmm_fit(frames, n: int, rng: RngStream, reg: float | None = None,
            max_em_iters: int = 500, tol: float = 1e-6) -> GmmModel:
    """Fit an ``n``-component full-covariance mixture by EM.

    Means are seeded k-means++ style, covariances start at the
    regularized pooled covariance, weights uniform. Each M-step adds
    ``reg * I`` to every covariance; by default
    ``reg = 1e-6 * trace(sample covariance) / dim``. Iteration stops when
    the relative log-likelihood change drops below ``tol``.
    """
    X = np.asarray(frames, dtype=np.float64)
    N, d = X.shape
    if n < 1:
        raise ValueError("n must be >= 1")
    if N <= n:
        raise ValueError(f"{N} frames cannot support {n} components")
    sample_cov = np.cov(X, rowvar=False, bias=True).reshape(d, d)
    if reg is None:
        reg = 1e-6 * np.trace(sample_cov) / d
    eye = reg * np.eye(d)

    means = _kmeanspp(X, n, rng)
    covs = np.repeat((sample_cov + eye)[None], n, axis=0)
    weights = np.full(n, 1.0 / n)
    trace = []
    for _ in range(max_em_iters):
        try:
            model = GmmModel(weights, means, covs)
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError("covariance not positive definite despite regularization") from None
        joint = model.component_logpdf(X) + np.log(weights)
        norm = logsumexp(joint, axis=1)
        ll = float(norm.sum())
        trace.append(ll)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= tol * abs(trace[-2]):
            break
        resp = np.exp(joint - norm[:, None])
        nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
        weights = nk / nk.sum()
        means = (resp.T @ X) / nk[:, None]
        covs = np.empty((n, d, d))
        for j in range(n):
            diff = X - means[j]
            covs[j] = (resp[:, j, None] * diff).T @ diff / nk[j] + eye
    model = GmmModel(weights, means, covs, trace)
    return model


def gmm_loglik(model: GmmModel, x):
    """``log sum_j w_j N(x; mean_j, cov_j)``; scalar for one frame, vector for a batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise ValueError(f"dimension mismatch: x has {x.shape[-1]}, model has {model.dim}")
    out = logsumexp(model.component_logpdf(np.atleast_2d(x)) + np.log(model.weights), axis=1)
    return float(out[0]) if x.ndim == 1 else out


@dataclass
class GmmPair:
    model_control: GmmModel
    model_patient: GmmModel
    prior_y: float = 0.5

    def __post_init__(self):
        if self.model_control.dim != self.model_patient.dim:
            raise ValueError("class models disagree on feature dimension")

    def subject_logliks(self, frames) -> np.ndarray:
        frames = np.atleast_2d(frames)
        if frames.shape[0] == 0:
            raise ValueError("subject needs at least one frame")
        return np.array([np.sum(gmm_loglik(m, frames)) for m in (self.model_control, self.model_patient)])

    def diagnose(self, frames) -> ClassLabel:
        return gmm_diagnose(self, frames, self.prior_y)


def gmm_diagnose(pair: GmmPair, frames, prior_y: float = 0.5) -> ClassLabel:
    return diagnose_from_elbos(*pair.subject_logliks(frames), prior_y)


def gmm_train(dataset: Dataset, n: int, rng: RngStream, **fit_kw) -> GmmPair:
    """One mixture per class over that class's pooled frames."""
    dataset.require_both_classes()
    models = [
        gmm_fit(np.vstack([s.frames for s in dataset.of_class(y)]), n, rng.spawn(int(y)), **fit_kw)
        for y in ClassLabel
    ]
    return GmmPair(*models)


# --------------------------------------------------------------------------
# MLP classifier


@dataclass(frozen=True)
class MlpHyper:
    n_x: int
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
    patience: int = 2_000
    init_std: float = 0.02
    stop_at_perfect: bool = True

    def __post_init__(self):
        if self.n_x < 1 or self.n_h < 1 or self.u_h < 1:
            raise ValueError("n_x, n_h and u_h must be >= 1")
        if not 0.0 <= self.drop_prob < 1.0:
            raise ValueError("drop_prob must lie in [0, 1)")


def mlp_layers(h: MlpHyper) -> list[LayerSpec]:
    dims = [h.n_x] + [h.n_h] * h.u_h
    layers = [LayerSpec(dims[i], h.n_h, True, "relu") for i in range(h.u_h)]
    # logit output; the logistic is applied in predict_proba so the loss stays stable
    layers.append(LayerSpec(h.n_h, 1, False, "identity"))
    return layers


@dataclass
class MlpClassifier:
    hyper: MlpHyper
    params: list

    def logits(self, frames) -> np.ndarray:
        out, _ = mlp_forward(mlp_layers(self.hyper), self.params, frames)
        return out[:, 0]

    def predict_proba(self, frames) -> np.ndarray:
        """``q(y=1 | x)`` per frame."""
        return np.exp(-np.logaddexp(0.0, -self.logits(frames)))

    def diagnose(self, frames) -> ClassLabel:
        return mlp_diagnose(self, frames)

    def flat(self) -> dict[str, np.ndarray]:
        return flatten_params({"mlp": self.params})

    @classmethod
    def from_flat(cls, hyper: MlpHyper, flat) -> "MlpClassifier":
        return cls(hyper, unflatten_params(flat, "mlp", hyper.u_h + 1))


def diagnose_from_probs(q1) -> ClassLabel:
    q1 = np.clip(np.asarray(q1, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    if q1.size == 0:
        raise ValueError("subject needs at least one frame")
    s1, s0 = np.sum(np.log(q1)), np.sum(np.log1p(-q1))
    return ClassLabel.PATIENT if s1 > s0 else ClassLabel.CONTROL


def mlp_diagnose(clf: MlpClassifier, frames) -> ClassLabel:
    """Frame ensemble: patient iff sum log q(1|x_t) > sum log q(0|x_t)."""
    return diagnose_from_probs(clf.predict_proba(np.atleast_2d(frames)))


def cross_entropy_and_grads(clf: MlpClassifier, x, y, mask=None):
    """Mean binary cross-entropy over the batch and its parameter gradients."""
    y = np.asarray(y, dtype=np.float64)
    mode = "train" if mask is not None else "eval"
    out, cache = mlp_forward(mlp_layers(clf.hyper), clf.params, x, None, mask, mode)
    a = out[:, 0]
    # -[y log s(a) + (1-y) log s(-a)]
    loss = float(np.mean(y * np.logaddexp(0.0, -a) + (1.0 - y) * np.logaddexp(0.0, a)))
    q = np.exp(-np.logaddexp(0.0, -a))
    grads, _ = mlp_backward(cache, ((q - y) / len(y))[:, None])
    return loss, grads


def mlp_train(dataset: Dataset, hyper: MlpHyper, rng: RngStream) -> MlpClassifier:
    """Adam on frame cross-entropy with balanced batches; best training-BACC snapshot wins."""
    dataset.require_both_classes()
    layers = mlp_layers(hyper)
    clf = MlpClassifier(hyper, init_params(layers, rng.spawn(0), hyper.init_std))
    sampler = BalancedSampler(dataset, rng.spawn(1))
    drop = rng.spawn(3)
    labelled = [s for s in dataset if s.label is not None]
    truths = np.array([int(s.label) for s in labelled])

    names = list(clf.flat())
    params = list(clf.flat().values())
    state = AdamState.for_params(params, alpha=hyper.alpha, beta1=hyper.beta1,
                                 beta2=hyper.beta2, epsilon=hyper.adam_eps)
    best_params, best_bacc = None, -np.inf
    best_loss, best_loss_iter, recent = np.inf, 0, []
    for it in range(1, hyper.max_iters + 1):
        x, y, _ = sampler.draw(hyper.batch_frames)
        mask = dropout_mask(x.shape, hyper.drop_prob, drop) if hyper.drop_prob > 0 else None
        loss, grads = cross_entropy_and_grads(clf, x, y, mask)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} at iteration {it}")
        params, state = adam_step(params, list(flatten_params({"mlp": grads}).values()), state)
        clf = MlpClassifier.from_flat(hyper, dict(zip(names, params)))
        recent = (recent + [loss])[-hyper.eval_every:]

        if it % hyper.eval_every and it != hyper.max_iters:
            continue
        preds = [int(mlp_diagnose(clf, s.frames)) for s in labelled]
        bacc = balanced_accuracy(preds, truths)
        if bacc > best_bacc:
            best_bacc, best_params = bacc, [p.copy() for p in params]
        smoothed = float(np.mean(recent))
        if smoothed < best_loss:
            best_loss, best_loss_iter = smoothed, it
        if hyper.stop_at_perfect and bacc >= 1.0:
            break
        if it - best_loss_iter >= hyper.patience:
            break
    return MlpClassifier.from_flat(hyper, dict(zip(names, best_params)))
