"""SVBRDF parameter maps, their 10-channel encoding, tiling and file I/O."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "SvbrdfMaps",
    "MaterialScalars",
    "SvbrdfError",
    "InvalidMapsError",
    "BadMagicError",
    "TruncatedFileError",
    "encode",
    "decode",
    "extract_scalars",
    "luminance",
    "blend_mask",
    "mask_weight",
    "tile",
    "seam_metric",
    "write_svb",
    "read_svb",
    "read_svb_header",
    "export_png",
    "to_bytes",
]

LUMA = np.array([0.2126, 0.7152, 0.0722])
ROUGHNESS_FLOOR = 0.01
MIN_NORMAL_Z = 0.05
UNIT_TOL = 1e-3
SVB_MAGIC = b"SVB1"
_HEADER = struct.Struct("<4sII")


class SvbrdfError(ValueError):
    """Base class for map and file errors."""


class InvalidMapsError(SvbrdfError):
    pass


class BadMagicError(SvbrdfError):
    pass


class TruncatedFileError(SvbrdfError):
    pass


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True, eq=False)
class SvbrdfMaps:
    """Four reflectance maps sharing one ``H x W`` grid.

    All arrays are float32 in ``[0, 1]``. ``normal`` holds tangent-space unit
    vectors packed as ``(n + 1) / 2``; ``roughness`` is ``H x W x 1`` and
    floored at 0.01.
    """

    normal: np.ndarray
    diffuse: np.ndarray
    specular: np.ndarray
    roughness: np.ndarray

    def __post_init__(self):
        for name in ("normal", "diffuse", "specular", "roughness"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            if arr.ndim == 2 and name == "roughness":
                arr = arr[:, :, None]
            object.__setattr__(self, name, arr)
        self.validate()

    @property
    def height(self) -> int:
        return self.diffuse.shape[0]

    @property
    def width(self) -> int:
        return self.diffuse.shape[1]

    @property
    def shape(self) -> tuple:
        return self.diffuse.shape[:2]

    def validate(self, tol: float = UNIT_TOL) -> None:
        h, w = self.diffuse.shape[:2]
        expected = {"normal": 3, "diffuse": 3, "specular": 3, "roughness": 1}
        for name, ch in expected.items():
            arr = getattr(self, name)
            if arr.shape != (h, w, ch):
                raise InvalidMapsError(f"{name} map has shape {arr.shape}, expected {(h, w, ch)}")
            if not np.all(np.isfinite(arr)):
                raise InvalidMapsError(f"{name} map contains non-finite values")
        if not (_is_pow2(h) and _is_pow2(w) and 16 <= h <= 256 and 16 <= w <= 256):
            raise InvalidMapsError(f"map size {h}x{w} must be powers of two in [16, 256]")
        for name in ("normal", "diffuse", "specular"):
            arr = getattr(self, name)
            if arr.min() < 0 or arr.max() > 1:
                raise InvalidMapsError(f"{name} values outside [0, 1]")
        if self.roughness.min() < ROUGHNESS_FLOOR or self.roughness.max() > 1:
            raise InvalidMapsError("roughness values outside [0.01, 1]")
        n = self.normal.astype(np.float64) * 2 - 1
        norm = np.linalg.norm(n, axis=-1)
        if np.abs(norm - 1).max() > tol:
            raise InvalidMapsError(f"normals deviate from unit length by {np.abs(norm - 1).max():.2e}")
        if n[..., 2].min() <= 0:
            raise InvalidMapsError("normals must have positive z")

    def normals(self) -> np.ndarray:
        """Decoded unit normals, ``H x W x 3``."""
        return self.normal * 2 - 1

    def channels(self) -> np.ndarray:
        """Stored values stacked channel-major, ``10 x H x W``."""
        stacked = np.concatenate([self.normal, self.diffuse, self.specular, self.roughness], axis=-1)
        return np.ascontiguousarray(stacked.transpose(2, 0, 1))

    @classmethod
    def from_channels(cls, chans: np.ndarray) -> "SvbrdfMaps":
        hwc = np.asarray(chans, dtype=np.float32).transpose(1, 2, 0)
        return cls(hwc[..., 0:3], hwc[..., 3:6], hwc[..., 6:9], hwc[..., 9:10])

    @classmethod
    def constant(cls, size: int, normal=(0.0, 0.0, 1.0), diffuse=0.5, specular=0.04,
                 roughness=0.5) -> "SvbrdfMaps":
        """Spatially uniform maps; colours may be scalars or RGB triples."""
        n = np.asarray(normal, dtype=np.float64)
        n = n / np.linalg.norm(n)

        def fill(v, ch):
            return np.broadcast_to(np.asarray(v, dtype=np.float32), (size, size, ch)).copy()

        return cls(fill((n + 1) / 2, 3), fill(diffuse, 3), fill(specular, 3), fill(roughness, 1))

    def equals(self, other: "SvbrdfMaps") -> bool:
        """Bitwise equality of all four maps."""
        return all(
            getattr(self, k).shape == getattr(other, k).shape
            and getattr(self, k).tobytes() == getattr(other, k).tobytes()
            for k in ("normal", "diffuse", "specular", "roughness")
        )


@dataclass(frozen=True)
class MaterialScalars:
    mean_roughness: float
    mean_specular: float


def luminance(rgb: np.ndarray) -> np.ndarray:
    """Rec. 709 luminance over the last axis."""
    return np.asarray(rgb, dtype=np.float64) @ LUMA


# ---------------------------------------------------------------------------
# encoding


def encode(maps: SvbrdfMaps) -> np.ndarray:
    """Pack the maps into a ``[10, H, W]`` float32 array in ``[-1, 1]``.

    Channel order: normal xyz, diffuse rgb, specular rgb, roughness.
    """
    return maps.channels() * np.float32(2) - np.float32(1)


def decode(t) -> SvbrdfMaps:
    """Inverse of :func:`encode` for arbitrary finite sampler output.

    Values are clamped to ``[-1, 1]`` before unpacking, roughness is floored
    at 0.01 and normals are renormalised with ``z >= 0.05`` (a zero vector
    becomes ``(0, 0, 1)``).
    """
    arr = np.asarray(getattr(t, "data", t), dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] != 10:
        raise SvbrdfError(f"expected a [10, H, W] tensor, got shape {list(arr.shape)}")
    if not np.all(np.isfinite(arr)):
        raise SvbrdfError("cannot decode non-finite values")
    c = np.clip(arr, -1, 1)
    vals = (c + np.float32(1)) / np.float32(2)
    diffuse = vals[3:6].transpose(1, 2, 0)
    specular = vals[6:9].transpose(1, 2, 0)
    roughness = np.maximum(vals[9:10], np.float32(ROUGHNESS_FLOOR)).transpose(1, 2, 0)
    normal = _pack_normals(c[0:3].transpose(1, 2, 0))
    return SvbrdfMaps(normal, diffuse, specular, roughness)


def _pack_normals(n: np.ndarray) -> np.ndarray:
    """Renormalise raw normal vectors and pack them into ``[0, 1]``.

    Vectors that already meet the map invariant (unit within 1e-3, ``z >=
    0.05``) are packed without renormalising, so valid maps survive an
    encode/decode round trip.
    """
    n = np.asarray(n, dtype=np.float32)
    n64 = n.astype(np.float64)
    n64[..., 2] = np.maximum(n64[..., 2], MIN_NORMAL_Z)
    norm = np.linalg.norm(n64, axis=-1, keepdims=True)
    unit = (n64 / norm).astype(np.float32)
    keep = (np.abs(np.linalg.norm(n.astype(np.float64), axis=-1) - 1) <= UNIT_TOL) & (n[..., 2] >= MIN_NORMAL_Z)
    unit = np.where(keep[..., None], n, unit)
    return np.clip((unit + np.float32(1)) / np.float32(2), 0, 1)


def extract_scalars(maps: SvbrdfMaps) -> MaterialScalars:
    return MaterialScalars(
        mean_roughness=float(np.mean(maps.roughness, dtype=np.float64)),
        mean_specular=float(np.mean(luminance(maps.specular))),
    )


# ---------------------------------------------------------------------------
# tiling


def mask_weight(y, x, h: int, w: int):
    """Blend weight of the original image at (possibly fractional) ``(y, x)``."""
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    wy = np.minimum(1.0, 2.0 * np.minimum(y, h - 1 - y) / (h - 1))
    wx = np.minimum(1.0, 2.0 * np.minimum(x, w - 1 - x) / (w - 1))
    return wy * wx


def blend_mask(h: int, w: int) -> np.ndarray:
    """Separable pyramid mask, 0 on every border and peaking at the centre."""
    return mask_weight(np.arange(h)[:, None], np.arange(w)[None, :], h, w)


def tile(maps: SvbrdfMaps) -> SvbrdfMaps:
    """Blend the maps with a copy rolled by half their size in both axes.

    The original dominates in the middle and the rolled copy at the borders,
    which hides the wrap-around seam. Normals are renormalised after mixing.
    """
    h, w = maps.shape
    if h % 2 or w % 2:
        raise SvbrdfError(f"tiling needs even dimensions, got {h}x{w}")
    m = blend_mask(h, w)[:, :, None]

    def mix(a):
        a64 = a.astype(np.float64)
        rolled = np.roll(a64, (h // 2, w // 2), axis=(0, 1))
        return m * a64 + (1 - m) * rolled

    n = mix(maps.normals())
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    normal = np.clip((n + 1) / 2, 0, 1).astype(np.float32)
    # blending equal values must give them back bit for bit
    same = np.all(maps.normal == np.roll(maps.normal, (h // 2, w // 2), axis=(0, 1)), axis=-1)
    normal = np.where(same[..., None], maps.normal, normal)

    def mix_plain(a):
        out = mix(a).astype(np.float32)
        return np.where(a == np.roll(a, (h // 2, w // 2), axis=(0, 1)), a, out)

    return SvbrdfMaps(normal, mix_plain(maps.diffuse), mix_plain(maps.specular),
                      np.maximum(mix_plain(maps.roughness), np.float32(ROUGHNESS_FLOOR)))


def seam_metric(maps: SvbrdfMaps) -> float:
    """Largest per-channel difference between opposite borders."""
    c = maps.channels().astype(np.float64)
    cols = np.abs(c[:, :, 0] - c[:, :, -1]).max()
    rows = np.abs(c[:, 0, :] - c[:, -1, :]).max()
    return float(max(cols, rows))


# ---------------------------------------------------------------------------
# files


def to_bytes(maps: SvbrdfMaps) -> bytes:
    h, w = maps.shape
    return _HEADER.pack(SVB_MAGIC, h, w) + maps.channels().astype("<f4").tobytes()


def write_svb(maps: SvbrdfMaps, path) -> None:
    """Write ``maps`` in the little-endian ``SVB1`` format."""
    Path(path).write_bytes(to_bytes(maps))


def read_svb_header(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    return _parse_header(head)


def _parse_header(head: bytes) -> tuple[int, int]:
    if len(head) < 4 or head[:4] != SVB_MAGIC:
        raise BadMagicError(f"bad magic {head[:4]!r}, expected {SVB_MAGIC!r}")
    if len(head) < _HEADER.size:
        raise TruncatedFileError("file ends inside the header")
    _, h, w = _HEADER.unpack(head[:_HEADER.size])
    return h, w


def read_svb(path) -> SvbrdfMaps:
    raw = Path(path).read_bytes()
    h, w = _parse_header(raw[:_HEADER.size])
    expected = 10 * h * w * 4
    payload = raw[_HEADER.size:]
    if len(payload) < expected:
        raise TruncatedFileError(
            f"{os.fspath(path)}: header declares {h}x{w} ({expected} bytes) but payload has {len(payload)}"
        )
    if len(payload) > expected:
        raise InvalidMapsError(f"{os.fspath(path)}: {len(payload) - expected} trailing bytes after payload")
    chans = np.frombuffer(payload, dtype="<f4").reshape(10, h, w).astype(np.float32)
    return SvbrdfMaps.from_channels(chans)


def _to_u8(arr: np.ndarray) -> np.ndarray:
    # round half up
    return np.floor(np.clip(arr.astype(np.float64), 0, 1) * 255 + 0.5).astype(np.uint8)


def export_png(maps: SvbrdfMaps, directory) -> list[Path]:
    """Write ``normal/diffuse/specular/roughness.png`` as 8-bit images."""
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name in ("normal", "diffuse", "specular"):
        p = directory / f"{name}.png"
        Image.fromarray(_to_u8(getattr(maps, name))).save(p)
        written.append(p)
    p = directory / "roughness.png"
    Image.fromarray(_to_u8(maps.roughness[:, :, 0])).save(p)
    written.append(p)
    return written
