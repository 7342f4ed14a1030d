import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from svbrdf_diffusion import numerics as nx
from svbrdf_diffusion.numerics import GradTape, NumericsError, ShapeError, Tensor


def grad_of(f, *xs):
    ts = [Tensor(x) for x in xs]
    with GradTape() as tape:
        tape.watch(*ts)
        y = f(*ts)
    g = nx.backward(tape, y)
    return [g[t].data for t in ts]


class TestTensor:
    def test_keeps_float32_and_float64(self):
        assert Tensor(np.ones(3, np.float32)).dtype == np.float32
        assert Tensor(np.ones(3)).dtype == np.float64
        assert Tensor([1, 2, 3]).dtype == np.float32

    def test_data_is_read_only(self):
        t = Tensor(np.zeros(3))
        with pytest.raises(ValueError):
            t.data[0] = 1

    def test_item_requires_scalar(self):
        assert Tensor(2.5).item() == 2.5
        with pytest.raises(NumericsError):
            Tensor(np.zeros(2)).item()

    def test_operators(self):
        a, b = Tensor(np.array([1.0, 2.0])), Tensor(np.array([3.0, 5.0]))
        np.testing.assert_array_equal((a + b).data, [4, 7])
        np.testing.assert_array_equal((a - b).data, [-2, -3])
        np.testing.assert_array_equal((a * b).data, [3, 10])
        np.testing.assert_array_equal((2 * a).data, [2, 4])
        np.testing.assert_array_equal((-a).data, [-1, -2])


class TestTape:
    def test_untracked_ops_are_not_recorded(self):
        with GradTape() as tape:
            a = Tensor(np.ones(3))
            nx.add(a, a)
        assert not tape.records

    def test_unused_watched_tensor_gets_zero_gradient(self):
        a, b = Tensor(np.ones(3)), Tensor(np.ones(2))
        with GradTape() as tape:
            tape.watch(a, b)
            y = nx.sum(nx.mul(a, a))
        g = nx.backward(tape, y)
        np.testing.assert_array_equal(g[a].data, 2 * np.ones(3))
        np.testing.assert_array_equal(g[b].data, np.zeros(2))

    def test_non_scalar_loss_rejected(self):
        a = Tensor(np.ones(3))
        with GradTape() as tape:
            tape.watch(a)
            y = nx.mul(a, a)
        with pytest.raises(NumericsError):
            nx.backward(tape, y)

    def test_reused_tensor_accumulates(self):
        (g,) = grad_of(lambda a: nx.sum(nx.add(nx.mul(a, a), a)), np.array([1.0, -2.0]))
        np.testing.assert_allclose(g, [3.0, -3.0])

    def test_nested_tapes_are_independent(self):
        a = Tensor(np.array([3.0]))
        with GradTape() as outer:
            outer.watch(a)
            with GradTape() as inner:
                y = nx.sum(nx.mul(a, a))
            assert not inner.records
        assert nx.backward(outer, y)[a].data[0] == pytest.approx(6.0)


class TestShapeErrors:
    def test_conv_channel_mismatch_names_both_shapes(self):
        x = np.zeros((1, 3, 8, 8), np.float32)
        k = np.zeros((4, 5, 3, 3), np.float32)
        with pytest.raises(ShapeError) as ei:
            nx.conv2d(x, k, np.zeros(4, np.float32))
        assert "[1, 3, 8, 8]" in str(ei.value) and "[4, 5, 3, 3]" in str(ei.value)

    def test_matmul_mismatch(self):
        with pytest.raises(ShapeError):
            nx.matmul(np.zeros((2, 3)), np.zeros((4, 5)))

    def test_add_incompatible(self):
        with pytest.raises(ShapeError):
            nx.add(np.zeros(3), np.zeros(4))

    def test_conv_stride(self):
        with pytest.raises(NumericsError):
            nx.conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), np.zeros(1), stride=3)


def _reference_conv(x, k, b, stride):
    """Direct loop convolution with zero padding 1."""
    n, c, h, w = x.shape
    kk = k.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
    out = np.zeros((n, kk, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
            out[:, :, i, j] = np.einsum("nchw,kchw->nk", patch, k) + b
    return out


class TestForwardOracles:
    @pytest.mark.parametrize("stride", [1, 2])
    def test_conv_matches_loop(self, rng, stride):
        x = rng.standard_normal((2, 3, 6, 6))
        k = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        np.testing.assert_allclose(nx.conv2d(x, k, b, stride).data, _reference_conv(x, k, b, stride), atol=1e-12)

    def test_group_norm_statistics(self, rng):
        x = rng.standard_normal((2, 16, 4, 4)) * 3 + 1
        y = nx.group_norm(x, np.ones(16), np.zeros(16), groups=8).data
        g = y.reshape(2, 8, -1)
        np.testing.assert_allclose(g.mean(-1), 0, atol=1e-12)
        np.testing.assert_allclose(g.var(-1), 1, atol=1e-3)

    def test_attention_matches_softmax_formula(self, rng):
        q, k, v = (rng.standard_normal((2, 5, 4)) for _ in range(3))
        s = q @ k.transpose(0, 2, 1) / 2.0
        p = np.exp(s - s.max(-1, keepdims=True))
        p /= p.sum(-1, keepdims=True)
        np.testing.assert_allclose(nx.attention(q, k, v).data, p @ v, atol=1e-12)

    def test_attention_stable_for_large_logits(self):
        q = np.full((1, 2, 2), 1e4)
        out = nx.attention(q, q, np.ones((1, 2, 2))).data
        assert np.all(np.isfinite(out))

    def test_upsample_and_pool(self):
        x = np.arange(4.0).reshape(1, 1, 2, 2)
        up = nx.upsample2x(x).data
        np.testing.assert_array_equal(up[0, 0], [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])
        np.testing.assert_array_equal(nx.avg_pool(up, 2).data, x)

    def test_silu(self):
        x = np.linspace(-5, 5, 11)
        np.testing.assert_allclose(nx.silu(x).data, x / (1 + np.exp(-x)), atol=1e-12)

    def test_linear_and_take_rows(self, rng):
        x, w, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)
        np.testing.assert_allclose(nx.linear(x, w, b).data, x @ w + b)
        table = rng.standard_normal((5, 3))
        np.testing.assert_array_equal(nx.take_rows(table, [4, 0, 4]).data, table[[4, 0, 4]])
        with pytest.raises(NumericsError):
            nx.take_rows(table, [5])


def _loss(t, proj):
    return nx.sum(nx.mul(t, Tensor(proj)))


class TestGradients:
    """Every op against central differences, in float64."""

    def check(self, f, x, tol=1e-6):
        assert nx.finite_diff_check(f, x, step=1e-5) < tol

    def test_conv_all_inputs(self, rng):
        x = rng.standard_normal((2, 3, 5, 5))
        k = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        for stride in (1, 2):
            proj = rng.standard_normal(nx.conv2d(x, k, b, stride).shape)
            self.check(lambda t: _loss(nx.conv2d(t, k, b, stride), proj), x)
            self.check(lambda t: _loss(nx.conv2d(x, t, b, stride), proj), k)
            self.check(lambda t: _loss(nx.conv2d(x, k, t, stride), proj), b)

    def test_group_norm(self, rng):
        x = rng.standard_normal((2, 8, 3, 3))
        gam, bet = rng.standard_normal(8), rng.standard_normal(8)
        proj = rng.standard_normal(x.shape)
        self.check(lambda t: _loss(nx.group_norm(t, gam, bet, 4), proj), x)
        self.check(lambda t: _loss(nx.group_norm(x, t, bet, 4), proj), gam)
        self.check(lambda t: _loss(nx.group_norm(x, gam, t, 4), proj), bet)

    def test_attention(self, rng):
        q, k, v = (rng.standard_normal((2, 4, 3)) for _ in range(3))
        proj = rng.standard_normal((2, 4, 3))
        self.check(lambda t: _loss(nx.attention(t, k, v), proj), q)
        self.check(lambda t: _loss(nx.attention(q, t, v), proj), k)
        self.check(lambda t: _loss(nx.attention(q, k, t), proj), v)

    def test_shape_and_linear_ops(self, rng):
        x = rng.standard_normal((2, 4, 2, 2))
        w = rng.standard_normal((3, 4))
        proj = rng.standard_normal((2, 3, 2, 2))
        self.check(lambda t: _loss(nx.pointwise_conv(t, w, np.zeros(3)), proj), x)
        self.check(lambda t: _loss(nx.pointwise_conv(x, t, np.zeros(3)), proj), w)
        p2 = rng.standard_normal((2, 4, 4, 4))
        self.check(lambda t: _loss(nx.upsample2x(t), p2), x)
        p3 = rng.standard_normal((2, 4, 1, 1))
        self.check(lambda t: _loss(nx.avg_pool(t, 2), p3), x)
        p4 = rng.standard_normal((4, 2, 2, 2))
        self.check(lambda t: _loss(nx.transpose(t, (1, 0, 2, 3)), p4), x)
        p5 = rng.standard_normal((2, 8, 2, 2))
        self.check(lambda t: _loss(nx.concat([t, nx.silu(t)], axis=1), p5), x)
        self.check(lambda t: nx.mean(nx.mul(nx.reshape(t, (2, 16)), nx.reshape(t, (2, 16)))), x)

    def test_linear_matmul_embedding(self, rng):
        x, w, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)
        proj = rng.standard_normal((3, 2))
        self.check(lambda t: _loss(nx.linear(t, w, b), proj), x)
        self.check(lambda t: _loss(nx.linear(x, t, b), proj), w)
        self.check(lambda t: _loss(nx.linear(x, w, t), proj), b)
        self.check(lambda t: _loss(nx.matmul(t, w), proj), x)
        table = rng.standard_normal((5, 2))
        self.check(lambda t: _loss(nx.take_rows(t, [1, 1, 3]), proj), table)

    def test_broadcast_gradients(self, rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal(4)
        proj = rng.standard_normal((3, 4))
        self.check(lambda t: _loss(nx.mul(a, t), proj), b)
        self.check(lambda t: _loss(nx.sub(a, t), proj), b)
        self.check(lambda t: _loss(nx.scale(t, -2.5), proj), a)

    def test_float32_analytic_gradient(self, rng):
        x = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
        k = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
        proj = rng.standard_normal((1, 2, 4, 4))
        assert nx.finite_diff_check(lambda t: _loss(nx.conv2d(t, k.astype(t.dtype), np.zeros(2, t.dtype)),
                                                    proj.astype(t.dtype)), x) < 1e-3

    def test_detects_a_wrong_gradient(self):
        def bad(t):
            out = Tensor._wrap(t.data ** 2)
            return nx.sum(nx._record(out, (t,), lambda g: (g * t.data,)))  # missing factor 2
        assert nx.finite_diff_check(bad, np.array([1.0, 2.0])) > 0.4


finite = st.floats(-10, 10, allow_nan=False, width=64)


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite))
def test_mul_gradient_is_other_factor(a, b):
    ga, gb = grad_of(lambda x, y: nx.sum(nx.mul(x, y)), a, b)
    np.testing.assert_array_equal(ga, b)
    np.testing.assert_array_equal(gb, a)


@given(arrays(np.float64, (2, 3, 4), elements=finite), st.permutations(range(3)))
def test_attention_key_value_permutation_invariance(q, perm):
    rng = np.random.default_rng(0)
    k, v = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 3, 4))
    base = nx.attention(q, k, v).data
    permuted = nx.attention(q, k[:, list(perm)], v[:, list(perm)]).data
    np.testing.assert_allclose(base, permuted, atol=1e-10)


@given(arrays(np.float64, (2, 8, 3, 3), elements=st.floats(-5, 5, width=64)), st.floats(0.1, 10), st.floats(-3, 3))
def test_group_norm_affine_invariance(x, a, c):
    ones, zeros = np.ones(8), np.zeros(8)
    y1 = nx.group_norm(x, ones, zeros, 8, eps=1e-12).data
    y2 = nx.group_norm(a * x + c, ones, zeros, 8, eps=1e-12).data
    spread = x.reshape(2, 8, -1).std(-1)
    ok = spread > 1e-3
    np.testing.assert_allclose(y1.reshape(2, 8, -1)[ok], y2.reshape(2, 8, -1)[ok], atol=1e-5)
