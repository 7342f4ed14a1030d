import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from svbrdf_diffusion import numerics as nx
from svbrdf_diffusion.diffusion import (
    NoiseSchedule,
    alpha,
    euler_sample,
    forward_diffuse,
    initial_noise,
    reconstruct_eps,
    reconstruct_x,
    rmse,
    sigma,
    v_loss,
    v_target,
)
from svbrdf_diffusion.numerics import GradTape, ShapeError, Tensor
from svbrdf_diffusion.selftest import point_mass_errors, point_mass_model


class TestSchedule:
    def test_endpoints_exact(self):
        assert alpha(0.0) == 1.0 and sigma(0.0) == 0.0
        assert alpha(1.0) == 0.0 and sigma(1.0) == 1.0

    def test_unit_circle_on_grid(self):
        s = NoiseSchedule(1000)
        assert len(s.times) == 1001
        assert np.abs(s.alpha ** 2 + s.sigma ** 2 - 1).max() <= 1e-6

    def test_monotone(self):
        s = NoiseSchedule(100)
        assert np.all(np.diff(s.alpha) < 0) and np.all(np.diff(s.sigma) > 0)

    def test_coefficients_range(self):
        with pytest.raises(ValueError):
            NoiseSchedule().coefficients(1.5)
        with pytest.raises(ValueError):
            NoiseSchedule(0)

    def test_hand_values(self):
        a, s = NoiseSchedule().coefficients(0.5)
        assert a == pytest.approx(math.sqrt(0.5)) and s == pytest.approx(math.sqrt(0.5))


class TestAlgebra:
    @given(st.integers(0, 2 ** 32 - 1), st.floats(0, 1))
    def test_reconstruction(self, seed, t):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1, 1, (10, 8, 8)).astype(np.float32)
        eps = rng.standard_normal((10, 8, 8), dtype=np.float32)
        z = forward_diffuse(x, eps, t)
        v = v_target(x, eps, t)
        np.testing.assert_allclose(reconstruct_x(z, v, t), x, atol=1e-5)
        np.testing.assert_allclose(reconstruct_eps(z, v, t), eps, atol=1e-5)

    def test_t_zero_and_one(self):
        x, eps = np.ones((2, 2)), np.full((2, 2), 3.0)
        np.testing.assert_array_equal(forward_diffuse(x, eps, 0.0), x)
        np.testing.assert_array_equal(forward_diffuse(x, eps, 1.0), eps)
        np.testing.assert_array_equal(v_target(x, eps, 0.0), eps)
        np.testing.assert_array_equal(v_target(x, eps, 1.0), -x)

    def test_per_row_times(self, rng):
        x = rng.standard_normal((3, 10, 4, 4))
        eps = rng.standard_normal((3, 10, 4, 4))
        t = np.array([0.1, 0.5, 0.9])
        z = forward_diffuse(x, eps, t)
        for i in range(3):
            np.testing.assert_allclose(z[i], forward_diffuse(x[i], eps[i], t[i]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            forward_diffuse(np.zeros((10, 4, 4)), np.zeros((10, 4, 5)), 0.5)
        with pytest.raises(ShapeError):
            v_loss(np.zeros(3), np.zeros(4))

    def test_t_out_of_range(self):
        with pytest.raises(ValueError):
            v_target(np.zeros(2), np.zeros(2), -0.1)


class TestLoss:
    def test_value_and_rmse(self):
        assert v_loss(np.array([1.0, 3.0]), np.array([0.0, 0.0])).item() == pytest.approx(5.0)
        assert rmse(np.array([1.0, 3.0]), np.zeros(2)) == pytest.approx(math.sqrt(5.0))

    def test_gradient(self, rng):
        v = rng.standard_normal(12)
        assert nx.finite_diff_check(lambda t: v_loss(t, v), rng.standard_normal(12), step=1e-5) < 1e-7
        vh = Tensor(np.zeros(12))
        with GradTape() as tape:
            tape.watch(vh)
            loss = v_loss(vh, v)
        np.testing.assert_allclose(nx.backward(tape, loss)[vh].data, -2 * v / 12)


class TestSampler:
    def test_point_mass_oracle(self):
        mass, zero = point_mass_errors()
        assert mass <= 1e-5 and zero <= 1e-4

    def test_single_step_returns_prediction(self):
        m = np.full((1, 10, 4, 4), 0.25)
        out = euler_sample(point_mass_model(m), None, m.shape, steps=1, seed=3)
        np.testing.assert_allclose(out, m, atol=1e-6)

    def test_deterministic(self):
        f = lambda z, t, c: 0.3 * z
        a = euler_sample(f, None, (2, 10, 4, 4), steps=7, seed=11)
        b = euler_sample(f, None, (2, 10, 4, 4), steps=7, seed=11)
        assert a.tobytes() == b.tobytes()

    def test_callback_sees_every_step(self):
        seen = []
        euler_sample(lambda z, t, c: np.zeros_like(z), None, (1, 10, 4, 4), steps=4, callback=lambda s: seen.append(s.t))
        assert seen == [0.75, 0.5, 0.25, 0.0]

    def test_model_shape_checked(self):
        with pytest.raises(ShapeError):
            euler_sample(lambda z, t, c: z[:, :5], None, (1, 10, 4, 4), steps=2)

    def test_bad_steps(self):
        with pytest.raises(ValueError):
            euler_sample(lambda z, t, c: z, None, (1, 10, 4, 4), steps=0)

    def test_model_receives_condition(self):
        got = []
        euler_sample(lambda z, t, c: got.append(c) or np.zeros_like(z), "cond", (1, 10, 4, 4), steps=2)
        assert got == ["cond", "cond"]


class TestNoise:
    def test_row_seeds_match_solo_draws(self):
        batch = initial_noise((3, 10, 4, 4), [5, 6, 7])
        for i, s in enumerate([5, 6, 7]):
            np.testing.assert_array_equal(batch[i], initial_noise((10, 4, 4), s))

    def test_seed_count_checked(self):
        with pytest.raises(ValueError):
            initial_noise((3, 2), [1, 2])

    def test_dtype(self):
        assert initial_noise((2, 2), 0).dtype == np.float32
