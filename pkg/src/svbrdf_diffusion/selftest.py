"""Fast invariant checks shared by the ``selftest`` command and the tests."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .diffusion import (
    NoiseSchedule,
    euler_sample,
    forward_diffuse,
    initial_noise,
    reconstruct_eps,
    reconstruct_x,
    v_loss,
    v_target,
)
from .numerics import Tensor
from .renderer import RenderConfig, render_linear, shade
from .svbrdf import SvbrdfMaps, blend_mask, seam_metric, tile
from .unet import Condition, UNetConfig, apply_unet, init_params

__all__ = [
    "CheckResult",
    "TINY_CONFIG",
    "check_v_algebra",
    "check_schedule",
    "check_point_mass",
    "check_renderer",
    "check_tile",
    "check_gradients",
    "unet_gradcheck",
    "random_maps",
    "run_selftest",
]

TINY_CONFIG = UNetConfig(base_resolution=16, level_channels=(8, 16), attention_threshold=8)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<14} {self.detail} ({self.seconds:.2f}s)"


# ---------------------------------------------------------------------------
# individual checks; each returns (passed, detail)


def v_algebra_error(triples: int = 1000, shape=(10, 32, 32), seed: int = 0) -> float:
    """Worst reconstruction error of ``x`` and ``eps`` from ``(z_t, v)``."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(triples):
        x = rng.uniform(-1, 1, shape).astype(np.float32)
        eps = rng.standard_normal(shape, dtype=np.float32)
        t = float(rng.random())
        z = forward_diffuse(x, eps, t)
        v = v_target(x, eps, t)
        worst = max(worst, float(np.abs(reconstruct_x(z, v, t) - x).max()),
                    float(np.abs(reconstruct_eps(z, v, t) - eps).max()))
    return worst


def check_v_algebra(triples: int = 200) -> tuple[bool, str]:
    err = v_algebra_error(triples)
    return err <= 1e-5, f"max error {err:.2e} over {triples} triples"


def schedule_error(sched: NoiseSchedule | None = None, points: int = 1001) -> tuple[float, bool]:
    sched = sched or NoiseSchedule(points - 1)
    t = np.linspace(0, 1, points)
    a = np.asarray(sched.alpha_at(t), dtype=np.float64)
    s = np.asarray(sched.sigma_at(t), dtype=np.float64)
    err = float(np.abs(a * a + s * s - 1).max())
    ends = float(sched.alpha_at(0.0)) == 1.0 and float(sched.sigma_at(1.0)) == 1.0
    return err, ends


def check_schedule(sched: NoiseSchedule | None = None) -> tuple[bool, str]:
    err, ends = schedule_error(sched)
    return err <= 1e-6 and ends, f"max |a^2+s^2-1| {err:.2e}, exact endpoints {ends}"


def point_mass_model(m: np.ndarray, sched: NoiseSchedule | None = None) -> Callable:
    """Ideal denoiser for data concentrated on ``m``: ``v = (alpha z - m) / sigma``."""
    sched = sched or NoiseSchedule()

    def model(z, t, cond):
        a, s = sched.coefficients(t)
        return ((a * z.astype(np.float64) - m) / s).astype(np.float32)

    return model


def point_mass_errors(step_counts=(1, 5, 50), shape=(1, 10, 16, 16), seed: int = 0) -> tuple[float, float]:
    """Errors of the sampler against the point-mass and zero-velocity oracles."""
    m = np.random.default_rng(seed + 100).uniform(-1, 1, shape)
    mass, zero = 0.0, 0.0
    for n in step_counts:
        x = euler_sample(point_mass_model(m), None, shape, steps=n, seed=seed)
        mass = max(mass, float(np.abs(x - m).max()))
        z1 = euler_sample(lambda z, t, c: np.zeros_like(z), None, shape, steps=n, seed=seed)
        expected = initial_noise(shape, seed).astype(np.float64) * math.cos(math.pi / (2 * n)) ** n
        zero = max(zero, float(np.abs(z1 - expected).max()))
    return mass, zero


def check_point_mass() -> tuple[bool, str]:
    mass, zero = point_mass_errors()
    ok = mass <= 1e-5 and zero <= 1e-4
    return ok, f"point-mass error {mass:.2e}, zero-velocity error {zero:.2e}"


def random_maps(rng: np.random.Generator, size: int) -> SvbrdfMaps:
    n = rng.normal(0, 0.4, (size, size, 3))
    n[..., 2] = np.abs(n[..., 2]) + 0.3
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return SvbrdfMaps(
        normal=((n + 1) / 2).astype(np.float32),
        diffuse=rng.random((size, size, 3)).astype(np.float32),
        specular=rng.random((size, size, 3)).astype(np.float32),
        roughness=rng.uniform(0.05, 1, (size, size, 1)).astype(np.float32),
    )


def renderer_errors(materials: int = 1, size: int = 16, seed: int = 0) -> tuple[float, float]:
    """Vectorised-vs-scalar error and the Lambertian centre-pixel error."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(materials):
        maps = random_maps(rng, size)
        light = (rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(0.5, 2.0))
        cfg = RenderConfig(light_position=light, light_intensity=float(rng.uniform(0.5, 3)))
        fast = render_linear(maps, cfg)
        normals = maps.normals().astype(np.float64)
        normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
        for i in range(size):
            for j in range(size):
                p = np.array([-1 + (j + 0.5) * 2 / size, 1 - (i + 0.5) * 2 / size, 0.0])
                to_l = np.asarray(light) - p
                d2 = float(to_l @ to_l)
                ref = shade(normals[i, j], maps.diffuse[i, j], maps.specular[i, j], float(maps.roughness[i, j, 0]),
                            to_l / math.sqrt(d2), (0.0, 0.0, 1.0), cfg.light_intensity / d2)
                worst = max(worst, float(np.abs(fast[i, j] - ref).max()))
    rho = 0.6
    flat = SvbrdfMaps.constant(size, diffuse=rho, specular=0.0, roughness=0.5)
    odd = size + 1
    centre = render_linear(flat, RenderConfig(light_position=(0, 0, 1), output_size=odd))[odd // 2, odd // 2]
    return worst, float(np.abs(centre - rho / np.pi).max())


def check_renderer() -> tuple[bool, str]:
    diff, lamb = renderer_errors()
    return diff <= 1e-5 and lamb <= 1e-6, f"vs scalar {diff:.2e}, Lambertian centre {lamb:.2e}"


def check_tile(size: int = 16) -> tuple[bool, str]:
    """Constant maps are unchanged; the borders carry the half-rolled input."""
    const = SvbrdfMaps.constant(size, normal=(0.2, -0.1, 0.97), diffuse=(0.3, 0.5, 0.7), specular=0.2,
                                roughness=0.4)
    unchanged = tile(const).equals(const) and seam_metric(tile(const)) <= 1e-3
    maps = random_maps(np.random.default_rng(1), size)
    out = tile(maps).channels()
    rolled = np.roll(maps.channels(), (size // 2, size // 2), axis=(1, 2))
    border = np.zeros((size, size), bool)
    border[[0, -1], :] = border[:, [0, -1]] = True
    border_err = float(np.abs(out[:, border] - rolled[:, border]).max())
    mask_ok = float(blend_mask(size, size).max()) <= 1 and float(blend_mask(size, size)[border].max()) == 0
    ok = unchanged and border_err <= 1e-3 and mask_ok
    return ok, f"constant unchanged {unchanged}, border vs rolled {border_err:.2e}"


def unet_gradcheck(config: UNetConfig = TINY_CONFIG, coords: int = 200, seed: int = 0, batch: int = 2) -> tuple[float, int]:
    """Finite-difference check of the velocity loss w.r.t. every parameter tensor.

    Runs in float64. The zero-initialised output conv is replaced by random
    weights first, otherwise all upstream gradients vanish and the check is
    vacuous. Coordinates are spread evenly over the tensors; returns the
    worst relative error and the number of coordinates checked.
    """
    rng = np.random.default_rng(seed)
    params = init_params(config, seed)
    weights = {k: v.astype(np.float64) for k, v in params.tensors.items()}
    weights["out.conv.weight"] = rng.normal(0, 0.1, weights["out.conv.weight"].shape)
    weights["out.conv.bias"] = rng.normal(0, 0.1, weights["out.conv.bias"].shape)
    res = config.base_resolution
    lr = config.latent_resolution
    z = rng.standard_normal((batch, 10, res, res))
    v = rng.standard_normal((batch, 10, res, res))
    t = rng.random(batch)
    conds = [Condition(i % config.num_classes, float(rng.random()), float(rng.random()),
                       rng.standard_normal((config.latent_channels, lr, lr)))
             for i in range(batch)]
    conds[-1] = Condition(conds[-1].class_id, roughness=0.3)
    names = list(weights)
    per = max(2, math.ceil(coords / len(names)))
    worst, checked = 0.0, 0
    for k, name in enumerate(names):
        fixed = {n: Tensor(a) for n, a in weights.items() if n != name}

        def f(x, name=name, fixed=fixed):
            w = dict(fixed)
            w[name] = x
            return v_loss(apply_unet(config, w, Tensor(z, dtype=x.dtype), t, conds), Tensor(v, dtype=x.dtype))

        n = min(per, weights[name].size)
        worst = max(worst, nx.finite_diff_check(f, weights[name], step=1e-4, coords=n, seed=seed + k))
        checked += n
    return worst, checked


def check_gradients() -> tuple[bool, str]:
    err, n = unet_gradcheck()
    return err < 1e-3, f"max relative error {err:.2e} over {n} coordinates"


CHECKS = (
    ("v-algebra", check_v_algebra),
    ("schedule", check_schedule),
    ("point-mass", check_point_mass),
    ("renderer", check_renderer),
    ("tile", check_tile),
    ("gradients", check_gradients),
)


def run_selftest(report: Callable[[str], None] = print) -> list:
    results = []
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failed check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        res = CheckResult(name, bool(ok), detail, time.perf_counter() - t0)
        report(res.line())
        results.append(res)
    return results
