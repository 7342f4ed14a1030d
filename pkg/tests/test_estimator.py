import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from svbrdf_diffusion import cli
from svbrdf_diffusion.dataset import PromptSpec, build_dataset, generate_sample
from svbrdf_diffusion.estimator import SeamlessTiler, SvbrdfDiffusion, SvbrdfEncoder
from svbrdf_diffusion.selftest import TINY_CONFIG, random_maps
from svbrdf_diffusion.svbrdf import SvbrdfMaps, read_svb, seam_metric
from svbrdf_diffusion.unet import init_params, save_checkpoint


def tiny(**kw):
    return SvbrdfDiffusion(base_resolution=16, level_channels=(8, 16), batch_size=2, total_steps=2,
                           checkpoint_every=2, sample_steps=2, **kw)


def test_params_and_clone():
    est = tiny(random_state=5)
    p = est.get_params()
    assert p["random_state"] == 5 and p["level_channels"] == (8, 16)
    c = clone(est)
    assert c.get_params() == p and c is not est
    assert est.set_params(total_steps=9).total_steps == 9


def test_encoder_roundtrip():
    maps = [generate_sample(PromptSpec("brick"), 16, s).maps for s in range(3)]
    enc = SvbrdfEncoder().fit(maps)
    x = enc.transform(maps)
    assert x.shape == (3, 10, 16, 16) and x.dtype == np.float32 and np.abs(x).max() <= 1
    back = enc.inverse_transform(x)
    for a, b in zip(maps, back):
        np.testing.assert_allclose(a.channels(), b.channels(), atol=1e-6)


def test_encoder_rejects_garbage():
    with pytest.raises((TypeError, ValueError)):
        SvbrdfEncoder().transform([np.zeros((4, 4))])
    with pytest.raises(ValueError):
        SvbrdfEncoder().inverse_transform(np.zeros((2, 9, 16, 16)))


def test_tiler():
    maps = [random_maps(np.random.default_rng(0), 16)]
    out = SeamlessTiler().fit_transform(maps)
    assert len(out) == 1 and out[0].shape == (16, 16)
    const = SvbrdfMaps.constant(16, diffuse=0.4)
    assert seam_metric(SeamlessTiler().transform([const])[0]) == 0.0


def test_unfitted():
    with pytest.raises(NotFittedError):
        tiny().predict(["wood"])


def test_fit_predict(tmp_path):
    data = build_dataset(tmp_path / "ds", ["checker", "rubber"], 3, 16, seed=0)
    est = tiny(out_dir=str(tmp_path / "run")).fit(str(data))
    assert len(est.loss_curve_) == 2 and est.checkpoint_.exists()
    out = est.predict(["checker", "rubber, low roughness"], seed=3)
    assert len(out) == 2 and all(isinstance(m, SvbrdfMaps) and m.shape == (16, 16) for m in out)
    again = tiny(out_dir=str(tmp_path / "run2")).fit(str(data)).predict(["checker", "rubber, low roughness"], seed=3)
    for a, b in zip(out, again):
        assert a.equals(b)


def test_sample_matches_cli(tmp_path):
    ckpt = tmp_path / "m.rfck"
    save_checkpoint(ckpt, init_params(TINY_CONFIG, 1))
    est = SvbrdfDiffusion.load(ckpt, sample_steps=3)
    got = est.sample("fabric-weave, high specular", count=2, seed=4)
    assert cli.main(["sample", "--ckpt", str(ckpt), "--prompt", "fabric-weave, high specular", "--count", "2",
                     "--seed", "4", "--steps", "3", "--out", str(tmp_path / "o")]) == 0
    for i, m in enumerate(got):
        np.testing.assert_allclose(m.channels(), read_svb(tmp_path / "o" / f"{i}.svb").channels(), atol=1e-6)


def test_bad_prompt():
    est = tiny()
    est.params_ = init_params(TINY_CONFIG, 0)
    with pytest.raises(ValueError):
        est.predict(["marble"])
