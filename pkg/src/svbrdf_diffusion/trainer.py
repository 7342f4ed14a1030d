"""Training loop for the velocity objective, with Adam, checkpoints and a TSV log."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .dataset import DatasetError, derive_condition, load_dataset, parse_prompt
from .diffusion import euler_sample, forward_diffuse, v_loss, v_target
from .numerics import GradTape, ShapeError, Tensor
from .svbrdf import decode, encode, extract_scalars, luminance, read_svb
from .unet import (
    Condition,
    ModelParams,
    UNetConfig,
    apply_unet,
    as_model,
    init_params,
    load_checkpoint,
    save_checkpoint,
)

__all__ = [
    "TrainConfig",
    "ConfigError",
    "Adam",
    "TrainLog",
    "TrainingData",
    "load_training_data",
    "train_step",
    "train",
    "save_training_checkpoint",
    "load_training_checkpoint",
    "eval_conditioning",
    "ConditioningReport",
    "read_log",
]

LOG_COLUMNS = ("step", "t_mean", "mse", "rmse", "wall_time")
STEP_KEY = "optim.step"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    dataset: str = "dataset"
    out_dir: str = "run"
    unet: UNetConfig = field(default_factory=UNetConfig)
    batch_size: int = 16
    total_steps: int = 5000
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    cond_dropout_prob: float = 0.1
    latent_dropout_prob: float = 0.5
    checkpoint_every: int = 500
    seed: int = 0
    log_path: str | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be non-negative")
        if self.total_steps >= 2 ** 24:
            raise ConfigError("total_steps must stay below 2**24 (stored as float32)")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps must be positive")
        for name in ("cond_dropout_prob", "latent_dropout_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be positive")

    @property
    def log_file(self) -> Path:
        return Path(self.log_path) if self.log_path else Path(self.out_dir) / "train_log.tsv"

    # key = value files -----------------------------------------------------

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        own = {f.name: f for f in fields(cls) if f.name != "unet"}
        net = {f.name: f for f in fields(UNetConfig)}
        top, sub = {}, {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in own:
                target, kind = top, own[key].type
            elif key in net:
                target, kind = sub, net[key].type
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in target:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            try:
                target[key] = _convert(key, value, kind)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
        try:
            return cls(unet=UNetConfig(**sub), **top)
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "unet":
                for g in fields(UNetConfig):
                    lines.append(f"{g.name} = {_format(getattr(self.unet, g.name))}")
            elif getattr(self, f.name) is not None:
                lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def _convert(key, value: str, kind):
    kind = str(kind)
    if key == "level_channels":
        return tuple(int(v) for v in value.replace(",", " ").split())
    if "int" in kind and "float" not in kind:
        return int(value)
    if "float" in kind:
        return float(value)
    return value


def _format(v):
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction; moments live in ``m1`` / ``m2`` keyed by name."""

    def __init__(self, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m1: dict = {}
        self.m2: dict = {}
        self.step = 0

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "Adam":
        return cls(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)

    def update(self, params: ModelParams, grads: dict) -> ModelParams:
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.step
        c2 = 1 - b2 ** self.step
        new = {}
        for name, p in params.tensors.items():
            g = grads[name]
            m1 = self.m1.get(name)
            m2 = self.m2.get(name)
            if m1 is None:
                m1 = np.zeros_like(p)
                m2 = np.zeros_like(p)
            m1 = (b1 * m1 + (1 - b1) * g).astype(np.float32)
            m2 = (b2 * m2 + (1 - b2) * g * g).astype(np.float32)
            self.m1[name], self.m2[name] = m1, m2
            if self.lr == 0:
                new[name] = p
                continue
            upd = (m1 / c1) / (np.sqrt(m2 / c2) + self.eps)
            new[name] = (p - self.lr * upd).astype(np.float32)
        return ModelParams(params.config, new)

    def state_tensors(self) -> dict:
        out = {STEP_KEY: np.array([self.step], dtype=np.float32)}
        for name in self.m1:
            out[f"{name}.m1"] = self.m1[name]
            out[f"{name}.m2"] = self.m2[name]
        return out

    def load_state(self, tensors: dict, params: ModelParams) -> None:
        if STEP_KEY not in tensors:
            raise ValueError("checkpoint carries no optimizer state")
        self.step = int(tensors[STEP_KEY][0])
        self.m1, self.m2 = {}, {}
        if self.step == 0:
            return
        for name, p in params.tensors.items():
            for key, store in ((f"{name}.m1", self.m1), (f"{name}.m2", self.m2)):
                if key not in tensors or tensors[key].shape != p.shape:
                    raise ValueError(f"optimizer moment {key!r} missing or misshapen")
                store[name] = tensors[key]


def save_training_checkpoint(path, params: ModelParams, opt: Adam) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, params, opt.state_tensors())
    return path


def load_training_checkpoint(path, cfg: TrainConfig | None = None) -> tuple[ModelParams, Adam]:
    params, extra = load_checkpoint(path)
    opt = Adam.from_config(cfg) if cfg else Adam()
    opt.load_state(extra, params)
    return params, opt


# ---------------------------------------------------------------------------
# data


@dataclass
class TrainingData:
    """Encoded maps and their full conditions, held in memory."""

    x: np.ndarray  # [N, 10, H, W] float32
    conds: list

    def __len__(self) -> int:
        return len(self.conds)


def load_training_data(directory, unet: UNetConfig) -> TrainingData:
    """Load a dataset directory and check it against the model config."""
    records = load_dataset(directory)
    xs, conds = [], []
    for rec in records:
        try:
            maps = read_svb(rec.path)
        except ValueError as exc:
            raise DatasetError(f"{rec.path}: {exc}") from None
        if maps.shape != (unet.base_resolution, unet.base_resolution):
            raise DatasetError(f"{rec.path}: size {maps.shape} does not match base_resolution {unet.base_resolution}")
        if rec.class_id >= unet.num_classes:
            raise DatasetError(f"{rec.path}: class_id {rec.class_id} exceeds num_classes {unet.num_classes}")
        sc = extract_scalars(maps)
        if abs(sc.mean_roughness - rec.mean_roughness) > 1e-6 or abs(sc.mean_specular - rec.mean_specular) > 1e-6:
            raise DatasetError(f"{rec.path}: manifest scalars disagree with the stored maps")
        xs.append(encode(maps))
        conds.append(derive_condition(maps, rec.spec, unet.latent_channels, scalars=sc))
    return TrainingData(np.stack(xs), conds)


def batch_indices(n: int, batch: int, step: int, seed: int) -> np.ndarray:
    """Indices of 1-based ``step`` under per-epoch seeded shuffles."""
    pos = np.arange((step - 1) * batch, step * batch)
    epochs = pos // n
    out = np.empty(batch, dtype=np.int64)
    for e in np.unique(epochs):
        perm = np.random.default_rng([seed, 0x5EED, int(e)]).permutation(n)
        sel = epochs == e
        out[sel] = perm[pos[sel] % n]
    return out


# ---------------------------------------------------------------------------
# optimisation


def _drop(conds: Sequence[Condition], rng: np.random.Generator, p_scalar: float, p_latent: float) -> list:
    out = []
    draws = rng.random((len(conds), 2))
    for c, (a, b) in zip(conds, draws):
        if a < p_scalar:
            c = c.without_scalars()
        if b < p_latent:
            c = c.without_latent()
        out.append(c)
    return out


def loss_and_grads(params: ModelParams, x: np.ndarray, conds: Sequence[Condition], t: np.ndarray,
                   eps: np.ndarray) -> tuple[float, dict]:
    z = forward_diffuse(x, eps, t)
    v = v_target(x, eps, t)
    weights = params.as_tensors()
    with GradTape() as tape:
        tape.watch(*weights.values())
        v_hat = apply_unet(params.config, weights, z, t, conds)
        loss = v_loss(v_hat, v)
    g = nx.backward(tape, loss)
    return loss.item(), {k: g[w].data for k, w in weights.items()}


def train_step(params: ModelParams, batch, rng: np.random.Generator, opt: Adam,
               cond_dropout_prob: float = 0.1, latent_dropout_prob: float = 0.5) -> tuple[ModelParams, float, float]:
    """One Adam step on a batch; returns ``(params, loss, t_mean)``.

    ``batch`` is either a sequence of :class:`~svbrdf_diffusion.dataset.TrainSample`
    or a pair ``(x, conds)`` of encoded maps and conditions.
    """
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray):
        x, conds = batch
    else:
        batch = list(batch)
        if not batch:
            raise ValueError("batch is empty")
        x = np.stack([encode(s.maps) for s in batch])
        conds = [s.condition for s in batch]
    if len(x) == 0:
        raise ValueError("batch is empty")
    res = params.config.base_resolution
    if x.shape[1:] != (10, res, res):
        raise ShapeError("train_step", x.shape, (len(x), 10, res, res))
    n = len(x)
    t = rng.random(n)
    eps = rng.standard_normal(x.shape, dtype=np.float32)
    conds = _drop(conds, rng, cond_dropout_prob, latent_dropout_prob)
    loss, grads = loss_and_grads(params, x, conds, t, eps)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss}")
    return opt.update(params, grads), loss, float(t.mean())


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, step, t_mean, mse, wall):
        if self.rows and step <= self.rows[-1][0]:
            raise ValueError("log steps must be strictly increasing")
        self.rows.append((int(step), float(t_mean), float(mse), float(np.sqrt(mse)), float(wall)))

    @property
    def losses(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])

    @property
    def steps(self) -> np.ndarray:
        return np.array([r[0] for r in self.rows], dtype=np.int64)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for step, tm, mse, rmse, wall in self.rows:
                w.writerow((step, repr(tm), repr(mse), repr(rmse), f"{wall:.3f}"))
        return path


def read_log(path) -> TrainLog:
    log = TrainLog()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        if tuple(next(reader)) != LOG_COLUMNS:
            raise ValueError(f"{path}: unexpected log header")
        for row in reader:
            log.append(int(row[0]), float(row[1]), float(row[2]), float(row[4]))
    return log


def checkpoint_path(out_dir, step: int) -> Path:
    return Path(out_dir) / f"checkpoint_{step:06d}.rfck"


def train(cfg: TrainConfig, resume: str | Path | None = None, data: TrainingData | None = None,
          progress: Callable | None = None) -> tuple[Path, TrainLog]:
    """Run ``cfg.total_steps`` steps; returns the final checkpoint path and the log.

    With ``resume`` the run continues from a checkpoint written by an earlier
    run with the same config; the trajectory then matches an unbroken run.
    """
    data = data or load_training_data(cfg.dataset, cfg.unet)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = TrainLog()
    if resume is not None:
        params, opt = load_training_checkpoint(resume, cfg)
        if params.config != cfg.unet:
            raise ConfigError("checkpoint model config differs from the training config")
        if cfg.log_file.is_file():
            for row in read_log(cfg.log_file).rows:
                if row[0] <= opt.step:
                    log.rows.append(row)
    else:
        params = init_params(cfg.unet, cfg.seed)
        opt = Adam.from_config(cfg)
    start = opt.step
    t0 = time.perf_counter() - (log.rows[-1][4] if log.rows else 0.0)
    last = None
    for step in range(start + 1, cfg.total_steps + 1):
        rng = np.random.default_rng([cfg.seed, step])
        idx = batch_indices(len(data), cfg.batch_size, step, cfg.seed)
        batch = (data.x[idx], [data.conds[i] for i in idx])
        params, loss, t_mean = train_step(params, batch, rng, opt, cfg.cond_dropout_prob, cfg.latent_dropout_prob)
        log.append(step, t_mean, loss, time.perf_counter() - t0)
        if progress is not None:
            progress(step, loss)
        if step % cfg.checkpoint_every == 0:
            last = save_training_checkpoint(checkpoint_path(out, step), params, opt)
            log.write(cfg.log_file)
    final = checkpoint_path(out, opt.step)
    if last != final:
        save_training_checkpoint(final, params, opt)
    log.write(cfg.log_file)
    return final, log


# ---------------------------------------------------------------------------
# evaluation


AXES = {"roughness": (0.15, 0.85), "specular": (0.05, 0.7)}


@dataclass
class ConditioningReport:
    axis: str
    low_values: np.ndarray
    high_values: np.ndarray

    @property
    def low_mean(self) -> float:
        return float(np.mean(self.low_values))

    @property
    def high_mean(self) -> float:
        return float(np.mean(self.high_values))

    @property
    def gap(self) -> float:
        return self.high_mean - self.low_mean

    def __str__(self) -> str:
        return (f"{self.axis}: low={self.low_mean:.4f} high={self.high_mean:.4f} "
                f"gap={self.gap:.4f} (n={len(self.low_values)})")


def sample_maps(params: ModelParams, conds: Sequence[Condition], seeds: Sequence[int], steps: int = 50,
                chunk: int = 32) -> list:
    """Decode one sample per (condition, seed) pair; rows match solo runs."""
    model = as_model(params)
    res = params.config.base_resolution
    out = []
    for lo in range(0, len(conds), chunk):
        c = list(conds[lo:lo + chunk])
        s = list(seeds[lo:lo + chunk])
        z = euler_sample(model, c, (len(c), 10, res, res), steps=steps, seed=s)
        out.extend(decode(zi) for zi in z)
    return out


def eval_conditioning(params, axis: str = "roughness", count: int = 32, steps: int = 50, seed: int = 0,
                      class_ids: Sequence[int] | None = None) -> ConditioningReport:
    """Sample low- and high-level groups with matched seeds and compare means.

    Sample ``i`` uses class ``class_ids[i % len(class_ids)]`` (all classes by
    default) in both groups; only the level scalar differs.
    """
    if axis not in AXES:
        raise ValueError(f"axis must be one of {sorted(AXES)}")
    if not isinstance(params, ModelParams):
        params, _ = load_checkpoint(params)
    class_ids = list(class_ids) if class_ids is not None else list(range(params.config.num_classes))
    seeds = [seed + i for i in range(count)]
    groups = []
    for level in AXES[axis]:
        kw = {axis: level}
        conds = [Condition(class_ids[i % len(class_ids)], **kw) for i in range(count)]
        maps = sample_maps(params, conds, seeds, steps)
        sc = [extract_scalars(m) for m in maps]
        groups.append(np.array([getattr(s, f"mean_{axis}") for s in sc]))
    return ConditioningReport(axis, groups[0], groups[1])


def mean_diffuse_luminance(params: ModelParams, class_id: int, count: int = 16, steps: int = 50,
                           seed: int = 0) -> float:
    maps = sample_maps(params, [Condition(class_id)] * count, [seed + i for i in range(count)], steps)
    return float(np.mean([luminance(m.diffuse).mean() for m in maps]))
