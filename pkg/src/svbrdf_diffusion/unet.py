"""Small encoder-decoder U-Net predicting velocity for 10-channel maps.

Levels above the attention threshold hold a single residual block; levels at
or below it hold ``res, attn, res, attn``. Every encoder level but the last
ends in a stride-2 convolution, the bottleneck is ``res, attn, res`` and the
decoder mirrors the encoder with nearest-neighbour upsampling and skip
concatenation. Time, class and physical-scalar conditioning is summed into
one embedding that every residual block adds to its features; the latent
guide grid is upsampled and concatenated to the input channels.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor
from .svbrdf import MaterialScalars

__all__ = [
    "UNetConfig",
    "ModelParams",
    "Condition",
    "CheckpointError",
    "time_embedding",
    "param_shapes",
    "init_params",
    "apply_unet",
    "unet_forward",
    "save_checkpoint",
    "load_checkpoint",
    "write_tensors",
    "read_tensors",
]

MAP_CHANNELS = 10
NORM_GROUPS = 8


@dataclass(frozen=True)
class UNetConfig:
    base_resolution: int = 32
    level_channels: tuple = (32, 64, 128)
    attention_threshold: int | None = None
    time_embed_dim: int = 64
    num_classes: int = 8
    latent_channels: int = 4

    def __post_init__(self):
        object.__setattr__(self, "level_channels", tuple(int(c) for c in self.level_channels))
        if self.attention_threshold is None:
            object.__setattr__(self, "attention_threshold", self.base_resolution // 4)
        if len(self.level_channels) < 2:
            raise ValueError("UNetConfig needs at least two levels")
        if self.base_resolution % (2 ** (len(self.level_channels) - 1)):
            raise ValueError("base_resolution must be divisible by 2**(levels - 1)")
        if self.base_resolution % 4:
            raise ValueError("base_resolution must be divisible by 4 (latent grid)")
        if self.attention_threshold < 1 or self.base_resolution % self.attention_threshold:
            raise ValueError("attention_threshold must divide base_resolution")
        if any(c % NORM_GROUPS for c in self.level_channels):
            raise ValueError(f"level channels must be multiples of {NORM_GROUPS}")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")

    def resolution(self, level: int) -> int:
        return self.base_resolution >> level

    def has_attention(self, level: int) -> bool:
        return self.resolution(level) <= self.attention_threshold

    @property
    def latent_resolution(self) -> int:
        return self.base_resolution // 4


@dataclass
class ModelParams:
    """Named float32 parameter arrays, in creation order."""

    config: UNetConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def count(self) -> int:
        return int(sum(a.size for a in self.tensors.values()))

    def as_tensors(self) -> dict:
        return {k: Tensor._wrap(v) for k, v in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


@dataclass(frozen=True)
class Condition:
    """Conditioning for one sample.

    ``roughness`` and ``specular`` are the optional physical scalars; either
    may be omitted independently. ``latent`` is the guide grid
    ``[latent_channels, base/4, base/4]`` or ``None``.
    """

    class_id: int
    roughness: float | None = None
    specular: float | None = None
    latent: np.ndarray | None = None

    @classmethod
    def from_scalars(cls, class_id: int, scalars: MaterialScalars | None, latent=None) -> "Condition":
        if scalars is None:
            return cls(class_id, latent=latent)
        return cls(class_id, scalars.mean_roughness, scalars.mean_specular, latent)

    @property
    def scalars_present(self) -> bool:
        return self.roughness is not None or self.specular is not None

    @property
    def scalars(self) -> MaterialScalars | None:
        if self.roughness is None or self.specular is None:
            return None
        return MaterialScalars(self.roughness, self.specular)

    def without_scalars(self) -> "Condition":
        return Condition(self.class_id, latent=self.latent)

    def without_latent(self) -> "Condition":
        return Condition(self.class_id, self.roughness, self.specular)

    def validate(self, config: UNetConfig) -> None:
        if not 0 <= self.class_id < config.num_classes:
            raise ValueError(f"class_id {self.class_id} outside [0, {config.num_classes})")
        if self.latent is not None:
            r = config.latent_resolution
            expected = (config.latent_channels, r, r)
            if tuple(np.shape(self.latent)) != expected:
                raise ShapeError("condition latent", np.shape(self.latent), expected)


# ---------------------------------------------------------------------------
# architecture description


def _res_shapes(prefix: str, cin: int, cout: int, emb: int) -> list:
    shapes = [
        (f"{prefix}.norm1.gamma", (cin,), "ones"),
        (f"{prefix}.norm1.beta", (cin,), "zeros"),
        (f"{prefix}.conv1.weight", (cout, cin, 3, 3), "fan_in"),
        (f"{prefix}.conv1.bias", (cout,), "zeros"),
        (f"{prefix}.emb.weight", (emb, cout), "fan_in"),
        (f"{prefix}.emb.bias", (cout,), "zeros"),
        (f"{prefix}.norm2.gamma", (cout,), "ones"),
        (f"{prefix}.norm2.beta", (cout,), "zeros"),
        (f"{prefix}.conv2.weight", (cout, cout, 3, 3), "fan_in"),
        (f"{prefix}.conv2.bias", (cout,), "zeros"),
    ]
    if cin != cout:
        shapes += [
            (f"{prefix}.skip.weight", (cout, cin), "fan_in"),
            (f"{prefix}.skip.bias", (cout,), "zeros"),
        ]
    return shapes


def _attn_shapes(prefix: str, ch: int) -> list:
    shapes = [(f"{prefix}.norm.gamma", (ch,), "ones"), (f"{prefix}.norm.beta", (ch,), "zeros")]
    for proj in ("q", "k", "v", "out"):
        shapes += [
            (f"{prefix}.{proj}.weight", (ch, ch), "fan_in"),
            (f"{prefix}.{proj}.bias", (ch,), "zeros"),
        ]
    return shapes


def param_shapes(config: UNetConfig) -> list:
    """Ordered ``(name, shape, init)`` triples for every parameter."""
    e = config.time_embed_dim
    ch = config.level_channels
    n_levels = len(ch)
    shapes = [
        ("time.fc1.weight", (e, e), "fan_in"),
        ("time.fc1.bias", (e,), "zeros"),
        ("time.fc2.weight", (e, e), "fan_in"),
        ("time.fc2.bias", (e,), "zeros"),
        ("class_embed", (config.num_classes, e), "normal"),
        ("scalar.weight", (2, e), "fan_in_scalar"),
        ("scalar.bias", (2, e), "fan_in_scalar"),
        ("conv_in.weight", (ch[0], MAP_CHANNELS + config.latent_channels, 3, 3), "fan_in"),
        ("conv_in.bias", (ch[0],), "zeros"),
    ]
    cin = ch[0]
    for i in range(n_levels):
        p = f"enc{i}"
        shapes += _res_shapes(f"{p}.res0", cin, ch[i], e)
        if config.has_attention(i):
            shapes += _attn_shapes(f"{p}.attn0", ch[i])
            shapes += _res_shapes(f"{p}.res1", ch[i], ch[i], e)
            shapes += _attn_shapes(f"{p}.attn1", ch[i])
        if i < n_levels - 1:
            shapes += [(f"{p}.down.weight", (ch[i], ch[i], 3, 3), "fan_in"), (f"{p}.down.bias", (ch[i],), "zeros")]
        cin = ch[i]
    shapes += _res_shapes("mid.res0", ch[-1], ch[-1], e)
    shapes += _attn_shapes("mid.attn0", ch[-1])
    shapes += _res_shapes("mid.res1", ch[-1], ch[-1], e)
    for i in reversed(range(n_levels)):
        p = f"dec{i}"
        shapes += _res_shapes(f"{p}.res0", 2 * ch[i], ch[i], e)
        if config.has_attention(i):
            shapes += _attn_shapes(f"{p}.attn0", ch[i])
            shapes += _res_shapes(f"{p}.res1", ch[i], ch[i], e)
            shapes += _attn_shapes(f"{p}.attn1", ch[i])
        if i > 0:
            shapes += [(f"{p}.up.weight", (ch[i - 1], ch[i], 3, 3), "fan_in"), (f"{p}.up.bias", (ch[i - 1],), "zeros")]
    shapes += [
        ("out.norm.gamma", (ch[0],), "ones"),
        ("out.norm.beta", (ch[0],), "zeros"),
        ("out.conv.weight", (MAP_CHANNELS, ch[0], 3, 3), "zeros"),
        ("out.conv.bias", (MAP_CHANNELS,), "zeros"),
    ]
    return shapes


def _fan_in(name: str, shape: tuple) -> int:
    if len(shape) == 4:
        return shape[1] * 9
    if name.endswith(("q.weight", "k.weight", "v.weight", "out.weight", "skip.weight")):
        return shape[1]
    return shape[0]


def init_params(config: UNetConfig, seed: int = 0) -> ModelParams:
    """Fan-in scaled uniform weights, unit norms, zero biases.

    The output convolution starts at zero so an untrained model predicts
    ``v = 0`` everywhere.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, kind in param_shapes(config):
        if kind == "zeros":
            arr = np.zeros(shape)
        elif kind == "ones":
            arr = np.ones(shape)
        elif kind == "normal":
            arr = rng.standard_normal(shape)
        elif kind == "fan_in_scalar":
            arr = rng.uniform(-1, 1, shape)
        else:
            bound = 1.0 / math.sqrt(_fan_in(name, shape))
            arr = rng.uniform(-bound, bound, shape)
        tensors[name] = arr.astype(np.float32)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# forward pass


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding with frequencies spaced geometrically in [1, 1e4].

    Returns interleaved ``(sin, cos)`` pairs; a batch of times gives
    ``[B, dim]``.
    """
    if dim % 2 or dim < 2:
        raise ValueError(f"embedding dimension must be even, got {dim}")
    half = dim // 2
    freqs = 10000.0 ** (np.arange(half) / max(half - 1, 1))
    t = np.asarray(t, dtype=np.float64)
    ang = t[..., None] * freqs
    out = np.empty(t.shape + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out.astype(np.float32)


def _channel_bias(x: Tensor, per_sample: Tensor) -> Tensor:
    n, c = per_sample.shape
    return nx.add(x, nx.reshape(per_sample, (n, c, 1, 1)))


def _res_block(w: Mapping, p: str, x: Tensor, emb: Tensor) -> Tensor:
    h = nx.silu(nx.group_norm(x, w[f"{p}.norm1.gamma"], w[f"{p}.norm1.beta"], NORM_GROUPS))
    h = nx.conv2d(h, w[f"{p}.conv1.weight"], w[f"{p}.conv1.bias"])
    h = _channel_bias(h, nx.linear(emb, w[f"{p}.emb.weight"], w[f"{p}.emb.bias"]))
    h = nx.silu(nx.group_norm(h, w[f"{p}.norm2.gamma"], w[f"{p}.norm2.beta"], NORM_GROUPS))
    h = nx.conv2d(h, w[f"{p}.conv2.weight"], w[f"{p}.conv2.bias"])
    skip = x
    if f"{p}.skip.weight" in w:
        skip = nx.pointwise_conv(x, w[f"{p}.skip.weight"], w[f"{p}.skip.bias"])
    return nx.add(skip, h)


def _spatial_transformer(w: Mapping, p: str, x: Tensor) -> Tensor:
    n, c, hh, ww = x.shape
    h = nx.group_norm(x, w[f"{p}.norm.gamma"], w[f"{p}.norm.beta"], NORM_GROUPS)

    def tokens(proj):
        y = nx.pointwise_conv(h, w[f"{p}.{proj}.weight"], w[f"{p}.{proj}.bias"])
        return nx.transpose(nx.reshape(y, (n, c, hh * ww)), (0, 2, 1))

    a = nx.attention(tokens("q"), tokens("k"), tokens("v"))
    a = nx.reshape(nx.transpose(a, (0, 2, 1)), (n, c, hh, ww))
    return nx.add(x, nx.pointwise_conv(a, w[f"{p}.out.weight"], w[f"{p}.out.bias"]))


def _embedding(config: UNetConfig, w: Mapping, t: np.ndarray, conds: Sequence[Condition], dtype) -> Tensor:
    temb = Tensor._wrap(time_embedding(t, config.time_embed_dim).astype(dtype))
    emb = nx.linear(nx.silu(nx.linear(temb, w["time.fc1.weight"], w["time.fc1.bias"])),
                    w["time.fc2.weight"], w["time.fc2.bias"])
    emb = nx.add(emb, nx.take_rows(w["class_embed"], [c.class_id for c in conds]))
    if any(c.scalars_present for c in conds):
        # per-field affine projection, masked where the scalar is absent
        vals = np.zeros((len(conds), 2), dtype=dtype)
        mask = np.zeros((len(conds), 2), dtype=dtype)
        for i, c in enumerate(conds):
            for j, v in enumerate((c.roughness, c.specular)):
                if v is not None:
                    vals[i, j], mask[i, j] = v, 1
        emb = nx.add(emb, nx.matmul(Tensor._wrap(vals), w["scalar.weight"]))
        emb = nx.add(emb, nx.matmul(Tensor._wrap(mask), w["scalar.bias"]))
    return emb


def apply_unet(config: UNetConfig, w: Mapping, z, t, conds: Sequence[Condition]) -> Tensor:
    """Forward pass with parameters given as a name -> Tensor mapping.

    Use this form under a :class:`~svbrdf_diffusion.numerics.GradTape` with
    watched parameter tensors to obtain gradients.
    """
    z = z if isinstance(z, Tensor) else Tensor._wrap(np.asarray(z, dtype=np.float32))
    b, c, h, wd = z.shape
    if c != MAP_CHANNELS or h != config.base_resolution or wd != config.base_resolution:
        raise ShapeError("unet_forward", z.shape,
                         (b, MAP_CHANNELS, config.base_resolution, config.base_resolution))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    if np.any((t < 0) | (t > 1)):
        raise ValueError("t must lie in [0, 1]")
    conds = list(conds)
    if len(conds) != b:
        raise ValueError(f"{len(conds)} conditions for a batch of {b}")
    for cond in conds:
        cond.validate(config)
    dtype = z.dtype

    emb = nx.silu(_embedding(config, w, t, conds, dtype))

    r = config.latent_resolution
    lat = np.zeros((b, config.latent_channels, r, r), dtype=dtype)
    for i, cond in enumerate(conds):
        if cond.latent is not None:
            lat[i] = cond.latent
    lat_up = np.repeat(np.repeat(lat, 4, axis=2), 4, axis=3)
    x = nx.concat([z, Tensor._wrap(lat_up)], axis=1)
    x = nx.conv2d(x, w["conv_in.weight"], w["conv_in.bias"])

    n_levels = len(config.level_channels)
    skips = []
    for i in range(n_levels):
        p = f"enc{i}"
        x = _res_block(w, f"{p}.res0", x, emb)
        if config.has_attention(i):
            x = _spatial_transformer(w, f"{p}.attn0", x)
            x = _res_block(w, f"{p}.res1", x, emb)
            x = _spatial_transformer(w, f"{p}.attn1", x)
        skips.append(x)
        if i < n_levels - 1:
            x = nx.conv2d(x, w[f"{p}.down.weight"], w[f"{p}.down.bias"], stride=2)

    x = _res_block(w, "mid.res0", x, emb)
    x = _spatial_transformer(w, "mid.attn0", x)
    x = _res_block(w, "mid.res1", x, emb)

    for i in reversed(range(n_levels)):
        p = f"dec{i}"
        x = nx.concat([x, skips[i]], axis=1)
        x = _res_block(w, f"{p}.res0", x, emb)
        if config.has_attention(i):
            x = _spatial_transformer(w, f"{p}.attn0", x)
            x = _res_block(w, f"{p}.res1", x, emb)
            x = _spatial_transformer(w, f"{p}.attn1", x)
        if i > 0:
            x = nx.conv2d(nx.upsample2x(x), w[f"{p}.up.weight"], w[f"{p}.up.bias"])

    x = nx.silu(nx.group_norm(x, w["out.norm.gamma"], w["out.norm.beta"], NORM_GROUPS))
    return nx.conv2d(x, w["out.conv.weight"], w["out.conv.bias"])


def unet_forward(params: ModelParams, z, t, conds: Sequence[Condition]) -> np.ndarray:
    """Predicted velocity ``[B, 10, H, H]`` for a batch of noised maps."""
    return apply_unet(params.config, params.as_tensors(), z, t, conds).data


def as_model(params: ModelParams):
    """Adapter to the ``model(z, t, cond)`` signature used by the sampler.

    ``cond`` may be a single :class:`Condition` (shared by the batch) or one
    per batch row.
    """
    weights = params.as_tensors()

    def model(z, t, cond):
        conds = [cond] * len(z) if isinstance(cond, Condition) else list(cond)
        return apply_unet(params.config, weights, z, t, conds).data

    return model


# ---------------------------------------------------------------------------
# checkpoint files


CHECKPOINT_MAGIC = b"RFCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_tensors(path, tensors: Mapping[str, np.ndarray], version: int = CHECKPOINT_VERSION) -> None:
    """Write named float32 arrays in the ``RFCK`` framing."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", version, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_tensors(path) -> tuple[int, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {raw[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", raw, 4)
        off = 12
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            n = int(np.prod(shape, dtype=np.int64))
            if off + 4 * n > len(raw):
                raise CheckpointError(f"tensor {name!r} is truncated")
            out[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
            off += 4 * n
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if off != len(raw):
        raise CheckpointError(f"{len(raw) - off} trailing bytes in checkpoint")
    return version, out


_META_FIELDS = ("base_resolution", "attention_threshold", "time_embed_dim", "num_classes", "latent_channels")


def config_tensors(config: UNetConfig) -> dict:
    meta = {f"meta.{k}": np.array([getattr(config, k)], dtype=np.float32) for k in _META_FIELDS}
    meta["meta.level_channels"] = np.array(config.level_channels, dtype=np.float32)
    return meta


def config_from_tensors(tensors: Mapping) -> UNetConfig:
    try:
        kw = {k: int(tensors[f"meta.{k}"][0]) for k in _META_FIELDS}
        kw["level_channels"] = tuple(int(c) for c in tensors["meta.level_channels"])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing {exc.args[0]}") from None
    return UNetConfig(**kw)


def save_checkpoint(path, params: ModelParams, extra: Mapping[str, np.ndarray] | None = None) -> None:
    tensors = dict(config_tensors(params.config))
    tensors.update(params.tensors)
    if extra:
        tensors.update(extra)
    write_tensors(path, tensors)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    """Load parameters; returns ``(params, extra)`` where ``extra`` holds
    every tensor that is neither metadata nor a model parameter."""
    _, tensors = read_tensors(path)
    config = config_from_tensors(tensors)
    params = {}
    for name, shape, _ in param_shapes(config):
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        if tensors[name].shape != shape:
            raise CheckpointError(f"parameter {name!r} has shape {tensors[name].shape}, expected {shape}")
        params[name] = tensors.pop(name)
    extra = {k: v for k, v in tensors.items() if not k.startswith("meta.")}
    return ModelParams(config, params), extra
