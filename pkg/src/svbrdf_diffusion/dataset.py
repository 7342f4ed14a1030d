"""Procedural SVBRDF materials, the prompt grammar and the latent guide.

Every generator is periodic in both axes and deterministic in
``(spec, size, seed)``.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .svbrdf import (
    ROUGHNESS_FLOOR,
    SvbrdfMaps,
    extract_scalars,
    encode,
    luminance,
    read_svb,
    write_svb,
)
from .unet import Condition

__all__ = [
    "CLASSES",
    "COLORS",
    "ROUGHNESS_LEVELS",
    "SPECULAR_LEVELS",
    "PromptSpec",
    "PromptError",
    "DatasetError",
    "TrainSample",
    "parse_prompt",
    "format_prompt",
    "synthesize",
    "generate_sample",
    "make_latent",
    "sample_seed",
    "build_dataset",
    "load_dataset",
    "DatasetRecord",
]

CLASSES = ("wood", "brick", "checker", "leather-grain", "metal-flake", "rubber", "stone", "fabric-weave")
COLORS = {
    "red": (0.80, 0.10, 0.10),
    "orange": (0.90, 0.50, 0.10),
    "yellow": (0.90, 0.80, 0.20),
    "green": (0.15, 0.60, 0.20),
    "blue": (0.15, 0.30, 0.80),
    "purple": (0.50, 0.20, 0.70),
    "white": (0.95, 0.95, 0.95),
    "black": (0.04, 0.04, 0.04),
}
LEVELS = ("low", "medium", "high")
ROUGHNESS_LEVELS = {"low": 0.15, "medium": 0.5, "high": 0.85}
SPECULAR_LEVELS = {"low": 0.05, "medium": 0.3, "high": 0.7}
PREFIX = "flat texture of"
RUBBER_MAX_LUMINANCE = 0.09


class PromptError(ValueError):
    """Prompt outside the grammar; carries the offending token and offset."""

    def __init__(self, message: str, token: str, position: int):
        self.token = token
        self.position = position
        super().__init__(f"{message}: {token!r} at position {position}")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class PromptSpec:
    material_class: str
    color: str | None = None
    roughness_level: str | None = None
    specular_level: str | None = None

    def __post_init__(self):
        if self.material_class not in CLASSES:
            raise ValueError(f"unknown class {self.material_class!r}")
        if self.color is not None and self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        for lv in (self.roughness_level, self.specular_level):
            if lv is not None and lv not in LEVELS:
                raise ValueError(f"unknown level {lv!r}")

    @property
    def class_id(self) -> int:
        return CLASSES.index(self.material_class)

    @property
    def roughness_target(self) -> float | None:
        return None if self.roughness_level is None else ROUGHNESS_LEVELS[self.roughness_level]

    @property
    def specular_target(self) -> float | None:
        return None if self.specular_level is None else SPECULAR_LEVELS[self.specular_level]

    def condition(self, latent=None) -> Condition:
        """Conditioning implied by the prompt alone (level targets as scalars)."""
        return Condition(self.class_id, self.roughness_target, self.specular_target, latent)


_CLAUSE = re.compile(r"^(?:color\s+(?P<color>\S+)|(?P<level>\S+)\s+(?P<kind>roughness|specular))$")


def parse_prompt(text: str) -> PromptSpec:
    """Parse ``[flat texture of ]<class>[, color <c>][, <lvl> roughness][, <lvl> specular]``.

    Matching is case-insensitive and the prefix is optional.
    """
    low = text.lower()
    pos = len(low) - len(low.lstrip())
    if low.startswith(PREFIX, pos):
        after = pos + len(PREFIX)
        if after == len(low) or low[after].isspace():
            pos = after
    fields: dict = {}
    first = True
    for piece in _split_with_offsets(low, pos):
        clause, at = piece
        stripped = clause.strip()
        at += len(clause) - len(clause.lstrip())
        if not stripped:
            raise PromptError("empty clause", clause, at)
        if first:
            if stripped not in CLASSES:
                raise PromptError("unknown class", stripped, at)
            fields["material_class"] = stripped
            first = False
            continue
        m = _CLAUSE.match(re.sub(r"\s+", " ", stripped))
        if m is None:
            raise PromptError("malformed clause", stripped, at)
        if m.group("color") is not None:
            key, value = "color", m.group("color")
            if value not in COLORS:
                raise PromptError("unknown color", value, at + stripped.index(value))
        else:
            key, value = f"{m.group('kind')}_level", m.group("level")
            if value not in LEVELS:
                raise PromptError("unknown level", value, at)
        if key in fields:
            raise PromptError("repeated clause", stripped, at)
        fields[key] = value
    if first:
        raise PromptError("missing material class", "", pos)
    return PromptSpec(**fields)


def _split_with_offsets(text: str, start: int):
    pos = start
    for part in text[start:].split(","):
        yield part, pos
        pos += len(part) + 1


def format_prompt(spec: PromptSpec, prefix: bool = False) -> str:
    parts = [spec.material_class]
    if spec.color:
        parts.append(f"color {spec.color}")
    if spec.roughness_level:
        parts.append(f"{spec.roughness_level} roughness")
    if spec.specular_level:
        parts.append(f"{spec.specular_level} specular")
    text = ", ".join(parts)
    return f"{PREFIX} {text}" if prefix else text


# ---------------------------------------------------------------------------
# periodic noise primitives


def value_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Tileable smooth noise in [0, 1] on a ``cells x cells`` lattice."""
    grid = rng.random((cells, cells))
    coords = np.arange(size) * cells / size
    i0 = np.floor(coords).astype(int)
    f = coords - i0
    f = f * f * (3 - 2 * f)
    i1 = (i0 + 1) % cells
    rows0 = grid[i0][:, None, :]
    rows1 = grid[i1][:, None, :]
    fy = f[:, None, None]
    rows = (rows0 * (1 - fy) + rows1 * fy)[:, 0, :]
    fx = f[None, :]
    return rows[:, i0] * (1 - fx) + rows[:, i1] * fx


def fbm(rng: np.random.Generator, size: int, octaves: int = 4, base: int = 4) -> np.ndarray:
    total = np.zeros((size, size))
    amp, norm = 1.0, 0.0
    for o in range(octaves):
        cells = min(base * 2 ** o, size)
        total += amp * value_noise(rng, size, cells)
        norm += amp
        amp *= 0.5
    return total / norm


def cellular(rng: np.random.Generator, size: int, points: int) -> tuple[np.ndarray, np.ndarray]:
    """Wrap-around Worley noise: distance to and index of the nearest point."""
    pts = rng.random((points, 2)) * size
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy = np.abs(yy[..., None] - pts[:, 0])
    dx = np.abs(xx[..., None] - pts[:, 1])
    dy = np.minimum(dy, size - dy)
    dx = np.minimum(dx, size - dx)
    d = np.sqrt(dy * dy + dx * dx)
    return d.min(axis=-1), d.argmin(axis=-1)


def normals_from_height(h: np.ndarray, strength: float) -> np.ndarray:
    """Unit normals (decoded) of a periodic height field; rows run downwards."""
    dx = (np.roll(h, -1, axis=1) - np.roll(h, 1, axis=1)) / 2
    drow = (np.roll(h, -1, axis=0) - np.roll(h, 1, axis=0)) / 2
    n = np.stack([-strength * dx, strength * drow, np.ones_like(h)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def _gray(v, size):
    return np.broadcast_to(np.asarray(v, dtype=np.float64)[..., None], (size, size, 3)) if np.ndim(v) == 2 \
        else np.broadcast_to(np.asarray(v, dtype=np.float64), (size, size, 3))


# ---------------------------------------------------------------------------
# per-class generators; each returns decoded normals, diffuse, specular, roughness


def _flat(size):
    n = np.zeros((size, size, 3))
    n[..., 2] = 1
    return n


def _checker(rng, size):
    options = [c for c in (2, 4, 8) if size // c >= 2]
    cells = int(rng.choice(options))
    cell = size // cells
    idx = (np.arange(size) // cell)
    parity = (idx[:, None] + idx[None, :]) % 2
    c1 = rng.uniform(0.6, 0.95, 3)
    c2 = rng.uniform(0.2, 0.45, 3)
    diffuse = np.where(parity[..., None] == 0, c1, c2)
    r1, r2 = rng.uniform(0.2, 0.7, 2)
    rough = np.where(parity == 0, r1, r2)
    spec = _gray(rng.uniform(0.03, 0.08), size)
    return _flat(size), diffuse, spec, rough


def _rubber(rng, size):
    base = rng.uniform(0.01, 0.05)
    noise = fbm(rng, size, 3, 4)
    diffuse = _gray(base + 0.02 * noise, size)
    spec = _gray(rng.uniform(0.2, 0.35) + 0.03 * (noise - 0.5), size)
    rough = rng.uniform(0.35, 0.6) + 0.1 * (fbm(rng, size, 2, 4) - 0.5)
    normal = normals_from_height(fbm(rng, size, 3, 8), strength=1.5)
    return normal, diffuse, spec, rough


def _wood(rng, size):
    freq = int(rng.choice([2, 3, 4]))
    warp = fbm(rng, size, 3, 2)
    coord = np.arange(size)[:, None] / size * np.ones((1, size))
    grain = 0.5 + 0.5 * np.sin(2 * np.pi * (freq * coord + rng.uniform(0.5, 1.5) * warp))
    if rng.random() < 0.5:
        grain = grain.T
    tone = rng.uniform(0.8, 1.1)
    light = np.array([0.65, 0.45, 0.25]) * tone
    dark = np.array([0.35, 0.20, 0.10]) * tone
    diffuse = dark + (light - dark) * grain[..., None]
    rough = rng.uniform(0.45, 0.65) + 0.2 * (grain - 0.5)
    spec = _gray(rng.uniform(0.03, 0.06), size)
    normal = normals_from_height(grain, strength=0.8)
    return normal, diffuse, spec, rough


def _brick(rng, size):
    rows = int(rng.choice([r for r in (2, 4, 8) if size // r >= 4]))
    bh = size // rows
    bw = 2 * bh if 2 * bh <= size else bh
    mortar = max(1, bh // 6)
    y = np.arange(size)[:, None]
    x = np.arange(size)[None, :]
    row = y // bh
    xs = (x + (row % 2) * (bw // 2)) % size
    in_mortar = ((y % bh) < mortar) | ((xs % bw) < mortar)
    brick_id = row * (size // bw + 1) + xs // bw
    shade = rng.uniform(0.8, 1.15, brick_id.max() + 1)[brick_id]
    red = np.array([0.55, 0.25, 0.18]) * rng.uniform(0.85, 1.1)
    noise = fbm(rng, size, 3, 8)
    brick_col = red * (shade * (0.85 + 0.3 * noise))[..., None]
    mortar_col = np.array([0.22, 0.22, 0.21]) * (0.9 + 0.2 * noise)[..., None]
    diffuse = np.where(in_mortar[..., None], mortar_col, brick_col)
    height = np.where(in_mortar, 0.0, 1.0) + 0.1 * noise
    normal = normals_from_height(height, strength=1.2)
    rough = np.where(in_mortar, 0.9, rng.uniform(0.6, 0.8)) + 0.05 * (noise - 0.5)
    spec = _gray(rng.uniform(0.02, 0.05), size)
    return normal, diffuse, spec, rough


def _leather(rng, size):
    pts = max(4, (size * size) // 48)
    d, _ = cellular(rng, size, pts)
    radius = size / np.sqrt(pts)
    bumps = 1 - np.clip(d / (0.7 * radius), 0, 1)
    bumps = bumps * bumps
    base = np.array([0.40, 0.24, 0.14]) * rng.uniform(0.5, 1.2)
    diffuse = base * (0.75 + 0.35 * bumps)[..., None]
    rough = rng.uniform(0.45, 0.65) - 0.15 * (bumps - 0.5)
    spec = _gray(rng.uniform(0.06, 0.12), size)
    normal = normals_from_height(bumps, strength=2.0)
    return normal, diffuse, spec, rough


_METALS = [(1.00, 0.78, 0.34), (0.95, 0.64, 0.54), (0.95, 0.93, 0.88), (0.91, 0.92, 0.92), (0.80, 0.85, 0.88)]


def _metal(rng, size):
    pts = max(6, (size * size) // 24)
    _, cell = cellular(rng, size, pts)
    metal = np.array(_METALS[int(rng.integers(len(_METALS)))])
    bright = rng.uniform(0.85, 1.0, pts)[cell]
    spec = metal * bright[..., None]
    diffuse = _gray(rng.uniform(0.01, 0.03), size)
    rough = rng.uniform(0.15, 0.35) + rng.uniform(-0.08, 0.08, pts)[cell]
    tilt = rng.normal(0, 0.15, (pts, 2))[cell]
    n = np.concatenate([tilt, np.ones((size, size, 1))], axis=-1)
    normal = n / np.linalg.norm(n, axis=-1, keepdims=True)
    return normal, diffuse, spec, rough


def _stone(rng, size):
    h = fbm(rng, size, 5, 4)
    tint = rng.uniform(0.9, 1.1, 3)
    diffuse = (0.25 + 0.45 * h)[..., None] * tint
    rough = rng.uniform(0.65, 0.8) + 0.15 * (h - 0.5)
    spec = _gray(rng.uniform(0.02, 0.05), size)
    normal = normals_from_height(h, strength=3.0)
    return normal, diffuse, spec, rough


def _fabric(rng, size):
    k = int(rng.choice([k for k in (4, 8) if size // k >= 2]))
    u = 2 * np.pi * k * np.arange(size) / size
    h = np.sin(u)[None, :] * np.cos(u)[:, None]
    color = rng.uniform(0.3, 0.8, 3)
    diffuse = color * (0.85 + 0.15 * h)[..., None]
    rough = rng.uniform(0.8, 0.95) + 0.03 * h
    spec = _gray(rng.uniform(0.015, 0.03), size)
    normal = normals_from_height(h, strength=1.0)
    return normal, diffuse, spec, rough


_GENERATORS = {
    "wood": _wood,
    "brick": _brick,
    "checker": _checker,
    "leather-grain": _leather,
    "metal-flake": _metal,
    "rubber": _rubber,
    "stone": _stone,
    "fabric-weave": _fabric,
}


def _tint(rgb: np.ndarray, color) -> np.ndarray:
    lum = luminance(rgb)
    rel = lum / max(float(lum.mean()), 1e-6)
    return np.clip(np.asarray(color) * rel[..., None], 0, 1)


def _tint_keep_luminance(rgb: np.ndarray, color) -> np.ndarray:
    c = np.asarray(color)
    return np.clip(c / float(c @ np.array([0.2126, 0.7152, 0.0722])) * luminance(rgb)[..., None], 0, 1)


def _match_mean(values: np.ndarray, current: float, target: float, floor: float) -> np.ndarray:
    """Affine remap in ``[floor, 1]`` whose mean lands exactly on ``target``."""
    if current > target:
        return floor + (values - floor) * ((target - floor) / (current - floor))
    if current < target:
        a = (target - current) / (1 - current)
        return values + (1 - values) * a
    return values


def synthesize(spec: PromptSpec, size: int, seed: int) -> dict:
    """Raw generator output at any even size (no map validation).

    Returns decoded normals, diffuse, specular and roughness as float64
    arrays; :func:`generate_sample` wraps this with the size contract.
    """
    rng = np.random.default_rng(int(seed))
    normal, diffuse, specular, rough = _GENERATORS[spec.material_class](rng, size)
    diffuse = np.array(np.broadcast_to(diffuse, (size, size, 3)), dtype=np.float64)
    specular = np.array(np.broadcast_to(specular, (size, size, 3)), dtype=np.float64)
    rough = np.clip(np.asarray(rough, dtype=np.float64), ROUGHNESS_FLOOR, 1)

    if spec.color is not None:
        if spec.material_class == "metal-flake":
            before = float(luminance(specular).mean())
            specular = _tint_keep_luminance(specular, COLORS[spec.color])
            after = float(luminance(specular).mean())
            if after < before:  # saturated tints clip; lift back towards white
                specular = specular + (1 - specular) * ((before - after) / (1 - after))
        else:
            diffuse = _tint(diffuse, COLORS[spec.color])
    if spec.material_class == "rubber":
        peak = luminance(diffuse).max()
        if peak > RUBBER_MAX_LUMINANCE:
            diffuse = diffuse * (RUBBER_MAX_LUMINANCE / peak)
    diffuse = np.clip(diffuse, 0, 1)
    specular = np.clip(specular, 0, 1)

    if spec.roughness_target is not None:
        rough = _match_mean(rough, float(rough.mean()), spec.roughness_target, ROUGHNESS_FLOOR)
    if spec.specular_target is not None:
        lum = luminance(specular)
        current = float(lum.mean())
        if current > spec.specular_target:
            specular = specular * (spec.specular_target / current)
        else:
            a = (spec.specular_target - current) / (1 - current)
            specular = specular + (1 - specular) * a
    return {"normal": normal, "diffuse": diffuse, "specular": specular, "roughness": rough}


def _is_pow2(n):
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True, eq=False)
class TrainSample:
    maps: SvbrdfMaps
    prompt: PromptSpec
    condition: Condition
    seed: int


def generate_sample(spec: PromptSpec, size: int, seed: int, latent_channels: int = 4) -> TrainSample:
    if not (_is_pow2(size) and 16 <= size <= 64):
        raise ValueError(f"size must be a power of two in [16, 64], got {size}")
    raw = synthesize(spec, size, seed)
    maps = SvbrdfMaps(
        normal=((raw["normal"] + 1) / 2).astype(np.float32),
        diffuse=raw["diffuse"].astype(np.float32),
        specular=raw["specular"].astype(np.float32),
        roughness=np.maximum(raw["roughness"].astype(np.float32), np.float32(ROUGHNESS_FLOOR))[..., None],
    )
    return TrainSample(maps, spec, derive_condition(maps, spec, latent_channels), int(seed))


def derive_condition(maps: SvbrdfMaps, spec: PromptSpec, latent_channels: int = 4,
                     scalars=None, with_latent: bool = True) -> Condition:
    """Training condition: class, measured scalars for the stated levels, latent."""
    scalars = scalars or extract_scalars(maps)
    latent = make_latent(maps, latent_channels) if with_latent else None
    return Condition(
        spec.class_id,
        scalars.mean_roughness if spec.roughness_level else None,
        scalars.mean_specular if spec.specular_level else None,
        latent,
    )


# ---------------------------------------------------------------------------
# latent guide


@lru_cache(maxsize=None)
def _latent_weights(latent_channels: int):
    rng = np.random.default_rng(0)
    proj = rng.uniform(-1, 1, (latent_channels, 10)) / np.sqrt(10)
    k1 = rng.uniform(-1, 1, (8, 1, 3, 3)) / 3
    k2 = rng.uniform(-1, 1, (latent_channels, 8, 3, 3)) / np.sqrt(72)
    return proj, k1, k2


def _circular_conv(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # wrap-pad then crop so the zero padding inside conv2d never shows
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="wrap")
    y = nx.conv2d(xp, kernel, np.zeros(kernel.shape[0], dtype=x.dtype)).data
    return y[:, :, 1:-1, 1:-1]


def make_latent(maps: SvbrdfMaps, latent_channels: int = 4) -> np.ndarray:
    """Frozen two-path feature grid ``[latent_channels, H/4, W/4]``.

    One path projects all ten channels and pools them; the other runs a
    small fixed convolution stack over grayscale diffuse. The paths are
    summed.
    """
    proj, k1, k2 = (w.astype(np.float32) for w in _latent_weights(latent_channels))
    x = encode(maps)[None]
    path_a = nx.avg_pool(nx.pointwise_conv(x, proj), 4).data
    gray = (luminance(maps.diffuse).astype(np.float32) * 2 - 1)[None, None]
    h = _circular_conv(gray, k1)
    h = h * (0.5 * (np.tanh(0.5 * h) + 1))
    h = _circular_conv(h.astype(np.float32), k2)
    path_b = nx.avg_pool(h, 4).data
    return (path_a + path_b)[0].astype(np.float32)


# ---------------------------------------------------------------------------
# dataset directories


MANIFEST = "manifest.tsv"
MANIFEST_COLUMNS = ("path", "prompt", "class_id", "mean_roughness", "mean_specular", "seed")


def sample_seed(seed: int, class_id: int, index: int) -> int:
    """Per-sample 64-bit seed, independent of generation order."""
    words = np.random.SeedSequence([int(seed), int(class_id), int(index)]).generate_state(2, np.uint32)
    return int(words[0]) | (int(words[1]) << 32)


def _augment(spec: PromptSpec, sseed: int, level_prob: float, color_prob: float) -> PromptSpec:
    if level_prob <= 0 and color_prob <= 0:
        return spec
    rng = np.random.default_rng([sseed, 1])
    color = rough = specular = None
    if rng.random() < color_prob:
        color = str(rng.choice(sorted(COLORS)))
    if rng.random() < level_prob:
        rough = str(rng.choice(LEVELS))
    if rng.random() < level_prob:
        specular = str(rng.choice(LEVELS))
    return replace(spec, color=color, roughness_level=rough, specular_level=specular)


@dataclass(frozen=True)
class DatasetRecord:
    path: Path
    prompt: str
    class_id: int
    mean_roughness: float
    mean_specular: float
    seed: int

    @property
    def spec(self) -> PromptSpec:
        return parse_prompt(self.prompt)


def build_dataset(
    directory,
    classes: Sequence[str] = CLASSES,
    per_class: int = 512,
    size: int = 32,
    seed: int = 0,
    level_prob: float = 0.0,
    color_prob: float = 0.0,
) -> Path:
    """Write ``<class>/<index>.svb`` files plus ``manifest.tsv``.

    ``level_prob`` and ``color_prob`` attach random level and colour clauses
    to the prompts (each clause independently).
    """
    if per_class < 1:
        raise ValueError("per_class must be at least 1")
    directory = Path(directory)
    rows = []
    for name in classes:
        base = PromptSpec(name)
        cid = base.class_id
        (directory / name).mkdir(parents=True, exist_ok=True)
        for index in range(per_class):
            sseed = sample_seed(seed, cid, index)
            spec = _augment(base, sseed, level_prob, color_prob)
            sample = generate_sample(spec, size, sseed)
            rel = f"{name}/{index}.svb"
            write_svb(sample.maps, directory / rel)
            sc = extract_scalars(sample.maps)
            rows.append((rel, format_prompt(spec), cid, repr(sc.mean_roughness), repr(sc.mean_specular), sseed))
    with open(directory / MANIFEST, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    return directory


def load_dataset(directory) -> list:
    """Read and check the manifest; raises :class:`DatasetError` on any mismatch."""
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.is_file():
        raise DatasetError(f"{manifest} not found")
    with open(manifest, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if tuple(header or ()) != MANIFEST_COLUMNS:
            raise DatasetError(f"unexpected manifest header {header}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(MANIFEST_COLUMNS):
                raise DatasetError(f"manifest line {lineno}: expected {len(MANIFEST_COLUMNS)} columns")
            try:
                rec = DatasetRecord(directory / row[0], row[1], int(row[2]), float(row[3]), float(row[4]), int(row[5]))
                spec = rec.spec
            except (ValueError, PromptError) as exc:
                raise DatasetError(f"manifest line {lineno}: {exc}") from None
            if spec.class_id != rec.class_id:
                raise DatasetError(f"manifest line {lineno}: class_id {rec.class_id} does not match prompt")
            if not rec.path.is_file():
                raise DatasetError(f"manifest line {lineno}: missing file {rec.path}")
            records.append(rec)
    if not records:
        raise DatasetError(f"{manifest} lists no samples")
    return records


def iter_samples(records: Iterable[DatasetRecord], latent_channels: int = 4):
    for rec in records:
        maps = read_svb(rec.path)
        yield rec, maps
