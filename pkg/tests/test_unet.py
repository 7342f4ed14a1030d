import numpy as np
import pytest

from svbrdf_diffusion.numerics import ShapeError
from svbrdf_diffusion.selftest import TINY_CONFIG
from svbrdf_diffusion.unet import (
    CheckpointError,
    Condition,
    UNetConfig,
    as_model,
    init_params,
    load_checkpoint,
    param_shapes,
    read_tensors,
    save_checkpoint,
    time_embedding,
    unet_forward,
    write_tensors,
)


def expected_param_count(cfg: UNetConfig) -> int:
    """Independent count from the block recipe (no shared code with the model)."""
    e, ch = cfg.time_embed_dim, cfg.level_channels

    def res(cin, cout):
        n = 2 * cin + (9 * cin * cout + cout) + (e * cout + cout) + 2 * cout + (9 * cout * cout + cout)
        return n + (cin * cout + cout if cin != cout else 0)

    def attn(c):
        return 2 * c + 4 * (c * c + c)

    total = 2 * (e * e + e) + cfg.num_classes * e + 2 * 2 * e
    total += 9 * (10 + cfg.latent_channels) * ch[0] + ch[0]
    cin = ch[0]
    for i, c in enumerate(ch):
        total += res(cin, c)
        if (cfg.base_resolution >> i) <= cfg.attention_threshold:
            total += 2 * attn(c) + res(c, c)
        if i < len(ch) - 1:
            total += 9 * c * c + c
        cin = c
    total += 2 * res(ch[-1], ch[-1]) + attn(ch[-1])
    for i in reversed(range(len(ch))):
        c = ch[i]
        total += res(2 * c, c)
        if (cfg.base_resolution >> i) <= cfg.attention_threshold:
            total += 2 * attn(c) + res(c, c)
        if i > 0:
            total += 9 * c * ch[i - 1] + ch[i - 1]
    total += 2 * ch[0] + 9 * ch[0] * 10 + 10
    return total


@pytest.mark.parametrize("cfg", [TINY_CONFIG, UNetConfig(), UNetConfig(32, (16, 32, 64)),
                                 UNetConfig(64, (32, 64, 128, 128), latent_channels=2, num_classes=3)])
def test_parameter_count_oracle(cfg):
    assert init_params(cfg).count() == expected_param_count(cfg)


def test_names_unique_and_attention_placement():
    names = [n for n, _, _ in param_shapes(UNetConfig())]
    assert len(names) == len(set(names))
    # 32 -> 16 -> 8: only the 8x8 level (and the bottleneck) carry attention
    assert not any(n.startswith(("enc0.attn", "enc1.attn", "dec0.attn", "dec1.attn")) for n in names)
    assert any(n.startswith("enc2.attn1") for n in names) and any(n.startswith("mid.attn0") for n in names)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(level_channels=(32,)), dict(level_channels=(12, 24)),
                                    dict(attention_threshold=5), dict(time_embed_dim=63),
                                    dict(base_resolution=18, level_channels=(8, 16))])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            UNetConfig(**kw)

    def test_default_threshold(self):
        assert UNetConfig(64).attention_threshold == 16


@pytest.fixture(scope="module")
def params():
    p = init_params(TINY_CONFIG, seed=3)
    rng = np.random.default_rng(0)
    p.tensors["out.conv.weight"] = rng.normal(0, 0.1, p["out.conv.weight"].shape).astype(np.float32)
    return p


class TestForward:
    def z(self, n=2, seed=0):
        return np.random.default_rng(seed).standard_normal((n, 10, 16, 16)).astype(np.float32)

    def test_zero_init_output(self):
        out = unet_forward(init_params(TINY_CONFIG), self.z(), 0.5, [Condition(0), Condition(1)])
        assert out.shape == (2, 10, 16, 16)
        np.testing.assert_array_equal(out, 0)

    def test_shape_and_dtype(self, params):
        out = unet_forward(params, self.z(), [0.2, 0.9], [Condition(0), Condition(1, 0.3, 0.5)])
        assert out.shape == (2, 10, 16, 16) and out.dtype == np.float32

    def test_rows_are_independent(self, params):
        z = self.z(3)
        conds = [Condition(0), Condition(2, 0.8), Condition(5, None, 0.1, np.ones((4, 4, 4), np.float32))]
        t = np.array([0.1, 0.5, 0.7])
        batch = unet_forward(params, z, t, conds)
        for i in range(3):
            np.testing.assert_allclose(batch[i], unet_forward(params, z[i:i + 1], t[i], conds[i:i + 1])[0], atol=1e-5)

    def test_every_condition_channel_matters(self, params):
        z = self.z(1)
        base = unet_forward(params, z, 0.5, [Condition(1)])
        variants = [Condition(2), Condition(1, roughness=0.9), Condition(1, specular=0.9),
                    Condition(1, latent=np.ones((4, 4, 4), np.float32))]
        for c in variants:
            assert np.abs(unet_forward(params, z, 0.5, [c]) - base).max() > 1e-4
        assert np.abs(unet_forward(params, z, 0.9, [Condition(1)]) - base).max() > 1e-4

    def test_errors(self, params):
        with pytest.raises(ShapeError):
            unet_forward(params, np.zeros((1, 10, 32, 32)), 0.5, [Condition(0)])
        with pytest.raises(ValueError):
            unet_forward(params, self.z(1), 0.5, [Condition(8)])
        with pytest.raises(ShapeError):
            unet_forward(params, self.z(1), 0.5, [Condition(0, latent=np.zeros((4, 8, 8)))])
        with pytest.raises(ValueError):
            unet_forward(params, self.z(2), 0.5, [Condition(0)])
        with pytest.raises(ValueError):
            unet_forward(params, self.z(1), 1.5, [Condition(0)])

    def test_model_adapter(self, params):
        z = self.z(2)
        m = as_model(params)
        np.testing.assert_array_equal(m(z, 0.3, Condition(1)), unet_forward(params, z, 0.3, [Condition(1)] * 2))


def test_time_embedding():
    e = time_embedding(np.array([0.0, 0.5]), 8)
    assert e.shape == (2, 8)
    np.testing.assert_array_equal(e[0, 0::2], 0)
    np.testing.assert_array_equal(e[0, 1::2], 1)
    assert e[1, 0] == pytest.approx(np.sin(0.5), abs=1e-6)
    with pytest.raises(ValueError):
        time_embedding(0.1, 7)


def test_init_is_seeded():
    a, b, c = init_params(TINY_CONFIG, 1), init_params(TINY_CONFIG, 1), init_params(TINY_CONFIG, 2)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["conv_in.weight"], c["conv_in.weight"])


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        p = init_params(UNetConfig(32, (16, 32, 64), num_classes=2), seed=4)
        extra = {"opt.m1": np.arange(6, dtype=np.float32).reshape(2, 3)}
        save_checkpoint(tmp_path / "c.rfck", p, extra)
        q, ex = load_checkpoint(tmp_path / "c.rfck")
        assert q.config == p.config
        assert list(q) == list(p)
        assert all(q[k].tobytes() == p[k].tobytes() for k in p)
        assert ex.keys() == extra.keys() and ex["opt.m1"].tobytes() == extra["opt.m1"].tobytes()

    def test_framing(self, tmp_path):
        write_tensors(tmp_path / "t.rfck", {"ab": np.array([[1.5, 2.0]], np.float32)})
        raw = (tmp_path / "t.rfck").read_bytes()
        expected = (b"RFCK" + (1).to_bytes(4, "little") + (1).to_bytes(4, "little") + (2).to_bytes(2, "little")
                    + b"ab" + bytes([2]) + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
                    + np.array([1.5, 2.0], "<f4").tobytes())
        assert raw == expected
        assert read_tensors(tmp_path / "t.rfck")[0] == 1

    def test_errors(self, tmp_path):
        p = tmp_path / "x.rfck"
        p.write_bytes(b"NOPE")
        with pytest.raises(CheckpointError):
            read_tensors(p)
        write_tensors(p, {"a": np.ones(4, np.float32)})
        raw = p.read_bytes()
        p.write_bytes(raw[:-2])
        with pytest.raises(CheckpointError):
            read_tensors(p)
        p.write_bytes(raw + b"\0")
        with pytest.raises(CheckpointError):
            read_tensors(p)
        with pytest.raises(CheckpointError):
            load_checkpoint(p)  # no metadata

    def test_missing_parameter(self, tmp_path):
        params = init_params(TINY_CONFIG)
        save_checkpoint(tmp_path / "c.rfck", params)
        _, tensors = read_tensors(tmp_path / "c.rfck")
        del tensors["conv_in.bias"]
        write_tensors(tmp_path / "d.rfck", tensors)
        with pytest.raises(CheckpointError, match="conv_in.bias"):
            load_checkpoint(tmp_path / "d.rfck")
