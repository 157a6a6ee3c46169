import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmridgm.data import ClassLabel, Dataset, SubjectRecord, SynthConfig, synth_generate
from fmridgm.dgm import (
    DgmHyper,
    DgmModel,
    contribution_frame,
    contribution_frames,
    contribution_region,
    contribution_weights,
    dataset_elbo,
    decode,
    diagnose,
    diagnose_from_elbos,
    encode,
    frame_elbo,
    negative_elbo_and_grads,
    posterior,
    posterior_from_elbos,
    region_recon_error,
    region_recon_errors,
    subject_elbo,
    top_regions,
    train,
)
from fmridgm.numerics import LOG_2PI, RngStream, dropout_mask, kl_diag_to_standard

from conftest import central_difference, random_model, rel_err


def label_blind(model):
    """Zero every weight fed by the one-hot label in encoder and decoder."""
    flat = {k: v.copy() for k, v in model.flat().items()}
    h = model.hyper
    flat[f"encoder.{h.u_h - 1}.W"][-2:] = 0.0
    flat["decoder.0.W"][h.n_z:] = 0.0
    return DgmModel.from_flat(h, flat)


def test_zero_model_encode_decode():
    m = DgmModel.zeros(DgmHyper(n_x=4, n_h=6, n_z=2))
    q = encode(m, np.arange(4.0), ClassLabel.PATIENT)
    np.testing.assert_array_equal(q.mean, 0.0)
    np.testing.assert_array_equal(q.variance, 1.0)
    p = decode(m, np.ones(2), ClassLabel.CONTROL)
    np.testing.assert_array_equal(p.mean, 0.0)
    np.testing.assert_array_equal(p.variance, 1.0)


def test_zero_model_frame_elbo():
    m = DgmModel.zeros(DgmHyper(n_x=4, n_h=6, n_z=2))
    x = np.array([0.5, -1.0, 2.0, 0.0])
    assert frame_elbo(m, x, 0) == pytest.approx(np.sum(-0.5 * LOG_2PI - x**2 / 2), abs=1e-12)
    assert frame_elbo(m, np.zeros(4), 1) == pytest.approx(-2 * LOG_2PI, abs=1e-12)


def test_label_path_is_live(small_model):
    x = RngStream(1).normal(6)
    q0, q1 = encode(small_model, x, 0), encode(small_model, x, 1)
    assert not np.allclose(q0.mean, q1.mean)
    z = RngStream(2).normal(3)
    assert not np.allclose(decode(small_model, z, 0).mean, decode(small_model, z, 1).mean)


def test_eval_encode_is_deterministic(small_model):
    x = RngStream(1).normal(6)
    a, b = encode(small_model, x, 1), encode(small_model, x, 1)
    np.testing.assert_array_equal(a.mean, b.mean)
    np.testing.assert_array_equal(a.variance, b.variance)


def test_subject_and_dataset_additivity(small_model):
    x = RngStream(3).normal(6)
    one = frame_elbo(small_model, x, 1)
    assert subject_elbo(small_model, x[None], 1) == one
    assert subject_elbo(small_model, np.stack([x, x]), 1) == pytest.approx(2 * one, rel=1e-15)

    r = RngStream(4)
    subs = [SubjectRecord(f"s{i}", i % 2, r.normal((5, 6))) for i in range(4)]
    a, b = Dataset(subs[:2]), Dataset(subs[2:])
    assert dataset_elbo(small_model, Dataset(subs[:1])) == subject_elbo(small_model, subs[0].frames, 0)
    assert dataset_elbo(small_model, a + b) == pytest.approx(
        dataset_elbo(small_model, a) + dataset_elbo(small_model, b), rel=1e-13)


def test_frame_elbo_sample_mode_needs_rng(small_model):
    with pytest.raises(ValueError):
        frame_elbo(small_model, np.zeros(6), 0, z_mode="sample")
    v = frame_elbo(small_model, np.zeros(6), 0, z_mode="sample", rng=RngStream(0))
    assert np.isfinite(v)


def test_decomposition_identity_exact():
    for i in range(25):
        m = random_model(100 + i)
        r = RngStream(i)
        x, y = r.normal(6), int(r.integers(2))
        kl = kl_diag_to_standard(encode(m, x, y))
        recon = sum(-region_recon_error(m, x, y, k) for k in range(6))
        assert abs(frame_elbo(m, x, y) - (-kl + recon)) <= 1e-12


def test_region_error_special_values():
    m = DgmModel.zeros(DgmHyper(n_x=3, n_h=4, n_z=2))
    # decoder mean 0, variance 1
    assert region_recon_error(m, np.zeros(3), 0, 1) == pytest.approx(0.5 * LOG_2PI, abs=1e-15)
    errs = [region_recon_error(m, np.array([0.0, d, 0.0]), 0, 1) for d in (0.0, 0.5, 1.0, 2.0, 4.0)]
    assert all(a < b for a, b in zip(errs, errs[1:]))
    with pytest.raises(IndexError):
        region_recon_error(m, np.zeros(3), 0, 3)
    with pytest.raises(IndexError):
        contribution_frame(m, np.zeros(3), 0, -1)


def test_posterior_examples():
    np.testing.assert_allclose(posterior_from_elbos(-10.0, -10.0), [0.5, 0.5])
    assert posterior_from_elbos(0.0, math.log(3))[1] == pytest.approx(0.75, abs=1e-15)
    assert posterior_from_elbos(-1e6, 1e6, prior_y=0.0)[1] == 0.0
    assert posterior_from_elbos(1e6, -1e6, prior_y=1.0)[0] == 0.0
    # huge magnitudes stay finite in log space
    p = posterior_from_elbos(-1e5, -1e5 + 2.0)
    assert np.isfinite(p).all() and abs(p.sum() - 1) <= 1e-12


def test_diagnose_rules():
    assert diagnose_from_elbos(-5.0, -4.0) == ClassLabel.PATIENT
    assert diagnose_from_elbos(-4.0, -5.0) == ClassLabel.CONTROL
    assert diagnose_from_elbos(-4.0, -4.0) == ClassLabel.CONTROL


@given(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4), st.floats(-1e3, 1e3))
def test_posterior_properties(l0, l1, c):
    p = posterior_from_elbos(l0, l1)
    assert abs(p.sum() - 1.0) <= 1e-12
    d = diagnose_from_elbos(l0, l1)
    assert d == (ClassLabel.PATIENT if p[1] > p[0] else ClassLabel.CONTROL)
    if abs(l1 - l0) > 1e-6:
        assert diagnose_from_elbos(l0 + c, l1 + c) == d


def test_diagnose_is_argmax_on_random_models():
    for i in range(100):
        m = random_model(i, scale=0.3)
        frames = RngStream(i, (1,)).normal((4, 6))
        p = posterior(m, frames)
        assert abs(p.sum() - 1) <= 1e-12
        assert diagnose(m, frames) == int(np.argmax(p))


def test_elbo_gradients_finite_difference():
    m = random_model(7)
    r = RngStream(8)
    x = r.normal((5, 6))
    y = np.array([0, 1, 1, 0, 1])
    eps = r.normal((5, 3))
    mask = dropout_mask(x.shape, 0.5, r.spawn(1))
    for msk in (None, mask):
        loss, eg, dg = negative_elbo_and_grads(m, x, y, eps, msk)
        keys = list(m.flat())
        nets = {"encoder": eg, "decoder": dg}
        grad = {}
        for k in keys:
            net, i, name = k.split(".")
            grad[k] = nets[net][int(i)][name]

        def f(vec):
            flat, pos = {}, 0
            for k in keys:
                n = grad[k].size
                flat[k] = vec[pos:pos + n].reshape(grad[k].shape)
                pos += n
            return negative_elbo_and_grads(DgmModel.from_flat(m.hyper, flat), x, y, eps, msk)[0]

        v0 = np.concatenate([m.flat()[k].ravel() for k in keys])
        g = np.concatenate([grad[k].ravel() for k in keys])
        assert f(v0) == pytest.approx(loss, rel=1e-14)
        for j in range(20):
            d = RngStream(9, (j,)).normal(v0.shape)
            assert rel_err(g @ d, central_difference(f, v0, d)) <= 1e-4


def test_contribution_compositional(small_model):
    frames = RngStream(5).normal((3, 6))
    for y in (0, 1):
        W = contribution_frames(small_model, frames, y)
        for t in range(3):
            for k in range(6):
                direct = (region_recon_error(small_model, frames[t], 1 - y, k)
                          - region_recon_error(small_model, frames[t], y, k))
                assert W[t, k] == pytest.approx(direct, abs=1e-12)
                assert contribution_frame(small_model, frames[t], y, k) == pytest.approx(W[t, k], abs=1e-12)
    np.testing.assert_allclose(contribution_frames(small_model, frames, 0),
                               -contribution_frames(small_model, frames, 1), atol=1e-12)
    # summed over regions: difference of full-frame log-likelihood terms
    full0 = -region_recon_errors(small_model, frames, 0).sum(axis=1)
    full1 = -region_recon_errors(small_model, frames, 1).sum(axis=1)
    np.testing.assert_allclose(contribution_frames(small_model, frames, 0).sum(axis=1), full0 - full1, atol=1e-12)


def _small_ds(seed, counts=(3, 2), T=(4, 7)):
    r = RngStream(seed)
    subs = []
    for y, n in enumerate(counts):
        for i in range(n):
            subs.append(SubjectRecord(f"c{y}-{i}", y, r.normal((T[i % 2], 6))))
    return Dataset(subs)


def test_label_blind_model_has_zero_weights(small_model):
    blind = label_blind(small_model)
    ds = _small_ds(1)
    assert np.max(np.abs(contribution_weights(blind, ds))) < 1e-12
    assert np.max(np.abs(contribution_frames(blind, ds.subjects[0].frames, 0))) < 1e-12


def test_contribution_weight_nested_mean(small_model):
    ds = _small_ds(2)
    manual = np.mean([
        np.mean([contribution_frames(small_model, s.frames, y).mean(axis=0) for s in ds.of_class(y)], axis=0)
        for y in (0, 1)
    ], axis=0)
    np.testing.assert_allclose(contribution_weights(small_model, ds), manual, atol=1e-14)
    dup = Dataset([SubjectRecord(s.subject_id, s.label, np.vstack([s.frames, s.frames])) for s in ds])
    np.testing.assert_allclose(contribution_weights(small_model, dup), manual, atol=1e-12)
    assert contribution_region(small_model, ds, 2) == pytest.approx(manual[2], abs=1e-14)
    with pytest.raises(IndexError):
        contribution_region(small_model, ds, 6)
    with pytest.raises(ValueError):
        contribution_weights(small_model, Dataset(list(ds.of_class(0))))


def test_top_regions_order():
    rows = top_regions([0.1, 0.5, -0.2, 0.5], ["a", "b", "c", "d"], top=3)
    assert [r[1] for r in rows] == ["b", "d", "a"]


def test_hyper_validation():
    with pytest.raises(ValueError):
        DgmHyper(n_x=4, n_h=4, n_z=4)


@pytest.fixture(scope="module")
def trained():
    ds = synth_generate(SynthConfig(n_x=8, n_subjects=8, frames=30, latent_dim=2,
                                    discriminative_set=(2, 5), effect_size=1.5, seed=4))
    h = DgmHyper(n_x=8, n_h=16, n_z=3, max_iters=300, eval_every=50)
    return ds, h, train(ds, h, RngStream(11))


def test_train_separable_and_deterministic(trained):
    ds, h, (model, log) = trained
    assert log.best.train_bacc >= 0.9
    model2, log2 = train(ds, h, RngStream(11))
    assert log.to_dict() == log2.to_dict()
    for k, v in model.flat().items():
        np.testing.assert_array_equal(v, model2.flat()[k])


def test_train_returns_best_snapshot(trained):
    ds, h, (model, log) = trained
    best = max(r.train_bacc for r in log.records)
    assert log.best.train_bacc == best
    first_best = next(i for i, r in enumerate(log.records) if r.train_bacc == best)
    assert log.best_snapshot == first_best
    assert dataset_elbo(model, ds) == pytest.approx(log.best.dataset_elbo, rel=1e-12)


def test_train_rejects_one_class():
    ds = synth_generate(SynthConfig(n_x=4, n_subjects=2, frames=10, latent_dim=1, discriminative_set=(0,)))
    with pytest.raises(Exception):
        train(Dataset(list(ds.of_class(0))), DgmHyper(n_x=4, n_h=6, n_z=2), RngStream(0))
