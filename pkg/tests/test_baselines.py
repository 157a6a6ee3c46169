import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from fmridgm.baselines import (
    GmmModel,
    GmmPair,
    MlpClassifier,
    MlpHyper,
    cross_entropy_and_grads,
    diagnose_from_probs,
    gmm_diagnose,
    gmm_fit,
    gmm_loglik,
    gmm_train,
    mlp_diagnose,
    mlp_layers,
    mlp_train,
)
from fmridgm.data import ClassLabel, Dataset, SubjectRecord, SynthConfig, synth_generate
from fmridgm.numerics import LOG_2PI, RngStream, dropout_mask, init_params

from conftest import central_difference, rel_err


def two_clusters(seed, n=200, sep=10.0):
    r = RngStream(seed)
    a = r.normal((n, 2)) * 0.5 + [0.0, 0.0]
    b = r.normal((n, 2)) * 0.5 + [sep, sep]
    return np.vstack([a, b]), np.array([[0.0, 0.0], [sep, sep]])


def test_single_component_closed_form():
    X = RngStream(0).normal((50, 3)) @ np.array([[1.0, 0.2, 0.0], [0.0, 1.0, 0.5], [0.0, 0.0, 2.0]])
    m = gmm_fit(X, 1, RngStream(1))
    cov = np.cov(X, rowvar=False, bias=True)
    np.testing.assert_allclose(m.means[0], X.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(m.covariances[0], cov + 1e-6 * np.trace(cov) / 3 * np.eye(3), atol=1e-12)
    assert m.weights[0] == pytest.approx(1.0)


def test_two_cluster_recovery():
    X, centers = two_clusters(3)
    m = gmm_fit(X, 2, RngStream(4))
    order = np.argsort(m.means[:, 0])
    np.testing.assert_allclose(m.means[order], centers, atol=0.1)
    resp = m.component_logpdf(X) + np.log(m.weights)
    resp = np.exp(resp - resp.max(axis=1, keepdims=True))
    resp /= resp.sum(axis=1, keepdims=True)
    assert np.min(np.max(resp, axis=1)) > 0.999


def test_em_trace_monotone():
    for seed in range(10):
        X, _ = two_clusters(seed, n=60, sep=2.0)
        m = gmm_fit(X, 3, RngStream(seed))
        assert np.min(np.diff(m.loglik_trace)) >= -1e-8


def test_loglik_against_scipy():
    r = RngStream(5)
    d = 3
    A = r.normal((2, d, d))
    covs = np.array([a @ a.T + np.eye(d) for a in A])
    m = GmmModel([0.3, 0.7], r.normal((2, d)), covs)
    x = r.normal(d)
    naive = math.log(0.3 * multivariate_normal(m.means[0], covs[0]).pdf(x)
                     + 0.7 * multivariate_normal(m.means[1], covs[1]).pdf(x))
    assert gmm_loglik(m, x) == pytest.approx(naive, abs=1e-10)


def test_loglik_identity_case():
    m = GmmModel([1.0], [[1.0, 2.0]], [np.eye(2)])
    assert gmm_loglik(m, [1.0, 2.0]) == pytest.approx(-LOG_2PI, abs=1e-14)


def test_loglik_far_from_means_is_finite():
    m = GmmModel([0.5, 0.5], [[0.0], [1.0]], [[[1.0]], [[1.0]]])
    v = gmm_loglik(m, [50.0])
    assert np.isfinite(v)
    # dominated by the nearer component
    assert v == pytest.approx(math.log(0.5) - 0.5 * LOG_2PI - 49.0**2 / 2, rel=1e-12)


def test_loglik_dimension_mismatch():
    m = GmmModel([1.0], [[0.0, 0.0]], [np.eye(2)])
    with pytest.raises(ValueError):
        gmm_loglik(m, [0.0, 0.0, 0.0])


def test_gmm_fit_rejects_too_few_frames():
    with pytest.raises(ValueError):
        gmm_fit(np.zeros((3, 2)), 3, RngStream(0))


def test_gmm_diagnose_rules():
    a = GmmModel([1.0], [[0.0, 0.0]], [np.eye(2)])
    b = GmmModel([1.0], [[8.0, 8.0]], [np.eye(2)])
    frames = RngStream(0).normal((5, 2)) + 8.0
    assert gmm_diagnose(GmmPair(a, b), frames) == ClassLabel.PATIENT
    assert gmm_diagnose(GmmPair(a, a), frames) == ClassLabel.CONTROL


def test_gmm_train_per_class():
    ds = synth_generate(SynthConfig(n_x=4, n_subjects=6, frames=40, latent_dim=2,
                                    discriminative_set=(0,), effect_size=2.0, seed=1))
    pair = gmm_train(ds, 2, RngStream(0))
    preds = [int(pair.diagnose(s.frames)) for s in ds]
    assert np.mean(np.array(preds) == np.array(ds.labels)) >= 0.9


def test_mlp_diagnose_examples():
    assert diagnose_from_probs([0.5, 0.5, 0.5]) == ClassLabel.CONTROL
    assert diagnose_from_probs([0.9]) == ClassLabel.PATIENT
    assert diagnose_from_probs([0.1]) == ClassLabel.CONTROL
    # saturated probabilities stay finite through the clip
    assert diagnose_from_probs([1.0, 1.0, 0.0]) == ClassLabel.PATIENT


def test_mlp_cross_entropy_gradients():
    h = MlpHyper(n_x=6, n_h=8)
    r = RngStream(2)
    params = init_params(mlp_layers(h), r, std=0.5)
    clf = MlpClassifier(h, params)
    x = r.normal((7, 6))
    y = np.array([0, 1, 1, 0, 1, 0, 0])
    mask = dropout_mask(x.shape, 0.5, r.spawn(1))
    for msk in (None, mask):
        _, grads = cross_entropy_and_grads(clf, x, y, msk)
        keys = list(clf.flat())
        g = np.concatenate([grads[int(k.split(".")[1])][k.split(".")[2]].ravel() for k in keys])
        v0 = np.concatenate([clf.flat()[k].ravel() for k in keys])
        shapes = [clf.flat()[k].shape for k in keys]

        def f(vec):
            flat, pos = {}, 0
            for k, s in zip(keys, shapes):
                n = int(np.prod(s))
                flat[k] = vec[pos:pos + n].reshape(s)
                pos += n
            return cross_entropy_and_grads(MlpClassifier.from_flat(h, flat), x, y, msk)[0]

        for j in range(20):
            d = RngStream(3, (j,)).normal(v0.shape)
            assert rel_err(g @ d, central_difference(f, v0, d)) <= 1e-4


def test_mlp_train_separable():
    ds = synth_generate(SynthConfig(n_x=6, n_subjects=6, frames=30, latent_dim=2,
                                    discriminative_set=(1, 4), effect_size=2.0, seed=2))
    clf = mlp_train(ds, MlpHyper(n_x=6, n_h=16, max_iters=500, eval_every=50, alpha=1e-3), RngStream(0))
    preds = np.array([int(mlp_diagnose(clf, s.frames)) for s in ds])
    truth = np.array(ds.labels)
    bacc = 0.5 * (np.mean(preds[truth == 1] == 1) + np.mean(preds[truth == 0] == 0))
    assert bacc >= 0.95


def test_mlp_train_deterministic():
    ds = synth_generate(SynthConfig(n_x=4, n_subjects=4, frames=20, latent_dim=1,
                                    discriminative_set=(0,), seed=5))
    h = MlpHyper(n_x=4, n_h=8, max_iters=60, eval_every=20, drop_prob=0.5)
    a, b = mlp_train(ds, h, RngStream(1)), mlp_train(ds, h, RngStream(1))
    for k, v in a.flat().items():
        np.testing.assert_array_equal(v, b.flat()[k])
