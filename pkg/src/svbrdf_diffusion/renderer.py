"""Point-light rendering of flat SVBRDF patches.

The BRDF is a Lambertian diffuse lobe plus a GGX microfacet specular lobe
with Schlick Fresnel and height-correlated Smith masking, ``alpha =
roughness**2``. The camera is orthographic and looks straight down onto the
plane ``z = 0`` spanning ``[-1, 1]^2``; +y points towards the top row.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .svbrdf import SvbrdfMaps

__all__ = [
    "RenderConfig",
    "RenderError",
    "shade",
    "schlick_fresnel",
    "ggx_distribution",
    "smith_g2",
    "render_linear",
    "render",
    "render_sweep",
    "sweep_positions",
    "save_png",
    "TOP_LEFT",
    "CENTER",
    "BOTTOM_RIGHT",
]

TOP_LEFT = (-1.0, 1.0, 1.0)
CENTER = (0.0, 0.0, 1.0)
BOTTOM_RIGHT = (1.0, -1.0, 1.0)
VIEW_DIR = (0.0, 0.0, 1.0)


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class RenderConfig:
    light_position: tuple = TOP_LEFT
    light_intensity: float = 1.0
    output_size: int | None = None
    gamma: float = 2.2
    exposure: float = 1.0

    def __post_init__(self):
        pos = tuple(float(v) for v in self.light_position)
        if len(pos) != 3:
            raise RenderError(f"light position needs three coordinates, got {len(pos)}")
        object.__setattr__(self, "light_position", pos)
        if pos[2] <= 0:
            raise RenderError(f"light must be above the plane (z > 0), got z={pos[2]}")
        if self.light_intensity <= 0:
            raise RenderError("light_intensity must be positive")
        if self.exposure <= 0:
            raise RenderError("exposure must be positive")
        if self.output_size is not None and self.output_size < 16:
            raise RenderError("output_size must be at least 16")


# ---------------------------------------------------------------------------
# BRDF terms, shared by the scalar and the vectorised paths


def schlick_fresnel(f0, cos_theta):
    return f0 + (1 - f0) * (1 - cos_theta) ** 5


def ggx_distribution(n_dot_h, alpha):
    a2 = alpha * alpha
    d = n_dot_h * n_dot_h * (a2 - 1) + 1
    return a2 / (np.pi * d * d)


def _smith_lambda(cos_theta, alpha):
    c2 = cos_theta * cos_theta
    tan2 = np.maximum(1 - c2, 0) / c2
    return (np.sqrt(1 + alpha * alpha * tan2) - 1) / 2


def smith_g2(n_dot_l, n_dot_v, alpha):
    """Height-correlated Smith masking-shadowing."""
    return 1 / (1 + _smith_lambda(n_dot_l, alpha) + _smith_lambda(n_dot_v, alpha))


def _check_unit(name, v, tol=1e-3):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (3,):
        raise RenderError(f"{name} must be a 3-vector")
    if abs(np.linalg.norm(v) - 1) > tol:
        raise RenderError(f"{name} is not unit length (|{name}| = {np.linalg.norm(v):.6f})")
    return v


def shade(n, d, s, r, light_dir, view_dir, attenuated_intensity) -> np.ndarray:
    """Outgoing RGB radiance of a single surface point.

    ``d`` and ``s`` are diffuse and specular albedo (scalars or RGB),
    ``r`` the roughness; directions point away from the surface.
    """
    n = _check_unit("n", n)
    l = _check_unit("light_dir", light_dir)
    v = _check_unit("view_dir", view_dir)
    if not 0.01 - 1e-6 <= r <= 1 + 1e-6:
        raise RenderError(f"roughness {r} outside [0.01, 1]")
    d = np.broadcast_to(np.asarray(d, dtype=np.float64), (3,))
    s = np.broadcast_to(np.asarray(s, dtype=np.float64), (3,))
    nl = float(n @ l)
    nv = float(n @ v)
    if nl <= 0 or nv <= 0:
        return np.zeros(3)
    h = l + v
    h = h / np.linalg.norm(h)
    alpha = r * r
    spec = (ggx_distribution(float(n @ h), alpha)
            * schlick_fresnel(s, float(h @ l))
            * smith_g2(nl, nv, alpha) / (4 * nl * nv))
    return attenuated_intensity * nl * (d / np.pi + spec)


# ---------------------------------------------------------------------------
# image rendering


def _resample(maps: SvbrdfMaps, size: int | None) -> tuple:
    """Nearest-neighbour resampling of the four maps to ``size`` pixels."""
    arrays = (maps.normals(), maps.diffuse, maps.specular, maps.roughness)
    if size is None or (size, size) == maps.shape:
        return arrays
    iy = (np.arange(size) * maps.height) // size
    ix = (np.arange(size) * maps.width) // size
    return tuple(a[iy][:, ix] for a in arrays)


def pixel_positions(h: int, w: int) -> np.ndarray:
    """World-space centres of the pixels, ``H x W x 3`` with ``z = 0``."""
    xs = -1 + (np.arange(w) + 0.5) * 2 / w
    ys = 1 - (np.arange(h) + 0.5) * 2 / h
    p = np.zeros((h, w, 3))
    p[..., 0] = xs[None, :]
    p[..., 1] = ys[:, None]
    return p


def render_linear(maps: SvbrdfMaps, cfg: RenderConfig) -> np.ndarray:
    """Linear radiance after exposure, before clamping and gamma."""
    n, d, s, r = _resample(maps, cfg.output_size)
    h, w = d.shape[:2]
    p = pixel_positions(h, w)
    to_light = np.asarray(cfg.light_position) - p
    dist2 = np.sum(to_light * to_light, axis=-1, keepdims=True)
    l = to_light / np.sqrt(dist2)
    irr = cfg.light_intensity / dist2

    n = n.astype(np.float64)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    v = np.asarray(VIEW_DIR)
    d = d.astype(np.float64)
    s = s.astype(np.float64)
    alpha = r.astype(np.float64) ** 2

    nl = np.sum(n * l, axis=-1, keepdims=True)
    nv = n[..., 2:3]
    lit = (nl > 0) & (nv > 0)
    nl_c = np.where(lit, nl, 1.0)
    nv_c = np.where(lit, nv, 1.0)
    hv = l + v
    hv /= np.linalg.norm(hv, axis=-1, keepdims=True)
    nh = np.sum(n * hv, axis=-1, keepdims=True)
    hl = np.sum(hv * l, axis=-1, keepdims=True)
    spec = (ggx_distribution(nh, alpha) * schlick_fresnel(s, hl)
            * smith_g2(nl_c, nv_c, alpha) / (4 * nl_c * nv_c))
    radiance = np.where(lit, irr * nl_c * (d / np.pi + spec), 0.0)
    return radiance * cfg.exposure


def tonemap(linear: np.ndarray, gamma: float = 2.2) -> np.ndarray:
    return np.clip(linear, 0, 1) ** (1 / gamma)


def render(maps: SvbrdfMaps, cfg: RenderConfig | None = None) -> np.ndarray:
    """Gamma-encoded ``H x W x 3`` image in ``[0, 1]``."""
    cfg = cfg or RenderConfig()
    return tonemap(render_linear(maps, cfg), cfg.gamma)


def render_sweep(maps: SvbrdfMaps, positions: Sequence, cfg: RenderConfig | None = None) -> list:
    positions = list(positions)
    if not positions:
        raise RenderError("render_sweep needs at least one light position")
    cfg = cfg or RenderConfig()
    return [render(maps, replace(cfg, light_position=tuple(p))) for p in positions]


def sweep_positions(frames: int, start=TOP_LEFT, end=BOTTOM_RIGHT) -> list:
    """Linear light path; a single frame sits at ``start``."""
    if frames < 1:
        raise RenderError("frames must be at least 1")
    if frames == 1:
        return [tuple(float(c) for c in start)]
    a, b = np.asarray(start, dtype=np.float64), np.asarray(end, dtype=np.float64)
    return [tuple(float(c) for c in a + (b - a) * i / (frames - 1)) for i in range(frames)]


def save_png(image: np.ndarray, path) -> Path:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    u8 = np.floor(np.clip(image, 0, 1) * 255 + 0.5).astype(np.uint8)
    Image.fromarray(u8).save(path)
    return path

