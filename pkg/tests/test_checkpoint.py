import numpy as np
import pytest

from fmridgm.baselines import MlpClassifier, MlpHyper, gmm_train, mlp_layers
from fmridgm.checkpoint import (
    CheckpointError,
    decode_checkpoint,
    encode_checkpoint,
    load_model,
    model_to_container,
    save_model,
)
from fmridgm.data import SynthConfig, synth_generate
from fmridgm.dgm import DgmHyper, DgmModel
from fmridgm.numerics import RngStream, init_params


def models():
    dgm = DgmModel.initialize(DgmHyper(n_x=5, n_h=7, n_z=2), RngStream(0))
    h = MlpHyper(n_x=5, n_h=6)
    mlp = MlpClassifier(h, init_params(mlp_layers(h), RngStream(1), 0.5))
    ds = synth_generate(SynthConfig(n_x=5, n_subjects=3, frames=20, latent_dim=2, discriminative_set=(0,)))
    gmm = gmm_train(ds, 2, RngStream(2))
    return [dgm, mlp, gmm]


@pytest.mark.parametrize("index", [0, 1, 2])
def test_model_round_trip_byte_exact(tmp_path, index):
    model = models()[index]
    p = tmp_path / "m.ckpt"
    save_model(p, model, seed=7, meta={"note": "x"})
    back, header = load_model(p)
    assert header["seed"] == 7 and header["meta"] == {"note": "x"}
    _, _, a = model_to_container(model)
    _, _, b = model_to_container(back)
    assert list(a) == list(b)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
    p2 = tmp_path / "m2.ckpt"
    save_model(p2, back, seed=7, meta={"note": "x"})
    assert p.read_bytes() == p2.read_bytes()


def test_dgm_checkpoint_predicts_the_same(tmp_path):
    dgm = models()[0]
    save_model(tmp_path / "d.ckpt", dgm)
    back, header = load_model(tmp_path / "d.ckpt")
    assert header["type"] == "dgm"
    frames = RngStream(3).normal((4, 5))
    np.testing.assert_array_equal(dgm.subject_elbos(frames), back.subject_elbos(frames))


def test_container_rejects_corruption(tmp_path):
    blob = encode_checkpoint("dgm", {}, {"a": np.ones(3)})
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"XXXXXXXX" + blob[8:])
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob + b"\0")
    with pytest.raises(CheckpointError):
        encode_checkpoint("dgm", {}, {"a": np.array([np.nan])})
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "absent.ckpt")
    header, arrays = decode_checkpoint(encode_checkpoint("gmm", {"n": 1}, {"s": np.array(2.0)}))
    assert arrays["s"].shape == () and arrays["s"] == 2.0
