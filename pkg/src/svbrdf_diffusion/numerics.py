"""Dense float tensors with tape-based reverse-mode differentiation.

Tensors wrap read-only numpy arrays. Operations executed while a
:class:`GradTape` is active (``with GradTape() as tape:``) are recorded when
any of their inputs is tracked, and :func:`backward` replays the record in
reverse registration order.

Storage is 32-bit. Float64 arrays are passed through untouched so that the
finite-difference checker can evaluate the same graph in double precision.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "Tensor",
    "GradTape",
    "NumericsError",
    "ShapeError",
    "backward",
    "finite_diff_check",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "linear",
    "conv2d",
    "pointwise_conv",
    "group_norm",
    "silu",
    "attention",
    "upsample2x",
    "avg_pool",
    "concat",
    "reshape",
    "transpose",
    "sum",
    "mean",
    "take_rows",
]


class NumericsError(ValueError):
    """Raised for invalid tensor operations."""


class ShapeError(NumericsError):
    """Raised when operand shapes are incompatible.

    The offending shapes are kept on the instance for callers that want to
    report them.
    """

    def __init__(self, op: str, *shapes: tuple, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " vs ".join(str(list(s)) for s in self.shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """Immutable dense array of floats.

    Parameters
    ----------
    data : array_like
        Values; copied on construction. Non-float input is converted to
        float32, float64 input is kept as is.
    """

    __slots__ = ("data", "__weakref__")

    def __init__(self, data, dtype=None):
        arr = np.array(_as_array(data, dtype), copy=True)
        arr.flags.writeable = False
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # no copy: used for freshly allocated op outputs
        t = cls.__new__(cls)
        arr = _as_array(arr)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise NumericsError(f"tensor of shape {list(self.shape)} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _to_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(_as_array(x))


# ---------------------------------------------------------------------------
# tape


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class GradTape:
    """Ordered record of operations applied to tracked tensors.

    A tape is confined to the thread that entered it. Tensors become tracked
    either by :meth:`watch` or by being produced from a tracked input while
    the tape is active.
    """

    def __init__(self):
        self.records: list = []
        self.watched: list = []
        self._watched_ids: set = set()
        self._tracked: set = set()
        # keeps every tracked tensor alive so ids stay unique
        self._keepalive: list = []

    def watch(self, *tensors: Tensor):
        for t in tensors:
            if not isinstance(t, Tensor):
                raise TypeError(f"can only watch Tensor objects, got {type(t).__name__}")
            if id(t) not in self._tracked:
                self._tracked.add(id(t))
                self._keepalive.append(t)
                self.watched.append(t)
                self._watched_ids.add(id(t))
        return tensors[0] if len(tensors) == 1 else tensors

    def is_tracked(self, t) -> bool:
        return isinstance(t, Tensor) and id(t) in self._tracked

    def record(self, out: Tensor, inputs: Sequence, backward_fn: Callable) -> None:
        self._tracked.add(id(out))
        self._keepalive.append(out)
        self.records.append((id(out), tuple(inputs), backward_fn))

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)
        return False

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list:
        grads = backward(self, loss)
        return [grads[s] for s in sources]


def _record(out: Tensor, inputs: Sequence, backward_fn: Callable) -> Tensor:
    # every active tape that tracks an input records the op
    for tape in _tape_stack():
        if any(tape.is_tracked(i) for i in inputs):
            tape.record(out, inputs, backward_fn)
    return out


def backward(tape: GradTape, loss: Tensor) -> dict:
    """Reverse-mode gradients of a scalar ``loss`` for every watched tensor.

    Returns a dict keyed by the watched :class:`Tensor` objects. Watched
    tensors with no path to ``loss`` receive zeros of matching shape.
    """
    if not isinstance(loss, Tensor):
        raise NumericsError("loss must be a Tensor")
    if loss.size != 1:
        raise NumericsError(f"loss must be a scalar, got shape {list(loss.shape)}")
    if not tape.is_tracked(loss):
        raise NumericsError("loss was not produced by operations recorded on this tape")

    grads: dict = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for out_id, inputs, fn in reversed(tape.records):
        # free intermediate gradients as soon as they are consumed
        g = grads.get(out_id) if out_id in tape._watched_ids else grads.pop(out_id, None)
        if g is None:
            continue
        in_grads = fn(g)
        for inp, ig in zip(inputs, in_grads):
            if ig is None or not tape.is_tracked(inp):
                continue
            key = id(inp)
            prev = grads.get(key)
            grads[key] = ig if prev is None else prev + ig

    result = {}
    for t in tape.watched:
        g = grads.get(id(t))
        if g is None:
            g = np.zeros(t.shape, dtype=t.dtype)
        result[t] = Tensor._wrap(np.asarray(g, dtype=t.dtype).reshape(t.shape))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra > 0:
        g = g.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = _to_tensor(a), _to_tensor(b)
    _broadcast_shape("add", a, b)
    out = Tensor._wrap(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _to_tensor(a), _to_tensor(b)
    _broadcast_shape("sub", a, b)
    out = Tensor._wrap(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _to_tensor(a), _to_tensor(b)
    _broadcast_shape("mul", a, b)
    out = Tensor._wrap(a.data * b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = _to_tensor(a)
    c = a.dtype.type(c)
    out = Tensor._wrap(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def silu(x) -> Tensor:
    x = _to_tensor(x)
    half = x.dtype.type(0.5)
    s = half * (np.tanh(half * x.data) + 1)
    out = Tensor._wrap(x.data * s)

    def bwd(g):
        return (g * (s * (1 + x.data * (1 - s))),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape) -> Tensor:
    x = _to_tensor(x)
    try:
        out = Tensor._wrap(x.data.reshape(shape))
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = _to_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor._wrap(np.ascontiguousarray(x.data.transpose(axes)))
    return _record(out, (x,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    ts = [_to_tensor(t) for t in tensors]
    try:
        out = Tensor._wrap(np.concatenate([t.data for t in ts], axis=axis))
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, ts, bwd)


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _to_tensor(x)
    out = Tensor._wrap(np.asarray(x.data.sum(), dtype=x.dtype))
    return _record(out, (x,), lambda g: (np.broadcast_to(g, x.shape),))


def mean(x) -> Tensor:
    x = _to_tensor(x)
    n = x.size
    out = Tensor._wrap(np.asarray(x.data.mean(), dtype=x.dtype))
    return _record(out, (x,), lambda g: (np.broadcast_to(g / x.dtype.type(n), x.shape),))


def take_rows(table, index) -> Tensor:
    """Gather rows of a 2-D ``table`` (embedding lookup)."""
    table = _to_tensor(table)
    idx = np.asarray(index, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError("take_rows", table.shape, detail="table must be 2-D")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise NumericsError(f"take_rows: index out of range for table with {table.shape[0]} rows")
    out = Tensor._wrap(table.data[idx])

    def bwd(g):
        gt = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record(out, (table,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _to_tensor(a), _to_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = Tensor._wrap(np.matmul(a.data, b.data))
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), bwd)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` over the last axis; weight is ``[in, out]``."""
    x, weight = _to_tensor(x), _to_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError("linear", x.shape, weight.shape)
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ weight.data
    if bias is not None:
        bias = _to_tensor(bias)
        y = y + bias.data
    out = Tensor._wrap(y.reshape(x.shape[:-1] + (weight.shape[1],)))

    def bwd(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, inputs, bwd)


def _im2col(xp: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix ``[C*9, N*ho*wo]`` of a padded ``[N, C, H+2, W+2]`` input."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(c, 3, 3, n, ho, wo),
        strides=(sc, sh, sw, sn, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(c * 9, n * ho * wo)


def conv2d(x, kernel, bias, stride: int = 1) -> Tensor:
    """3x3 cross-correlation with zero padding of one pixel.

    ``x`` is ``[N, C, H, W]``, ``kernel`` is ``[K, C, 3, 3]`` and the output
    is ``[N, K, ceil(H/stride), ceil(W/stride)]``.
    """
    x, kernel, bias = _to_tensor(x), _to_tensor(kernel), _to_tensor(bias)
    if stride not in (1, 2):
        raise NumericsError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.data.ndim != 4 or kernel.data.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise ShapeError("conv2d", x.shape, kernel.shape, detail="expected [N,C,H,W] and [K,C,3,3]")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(
            "conv2d", x.shape, kernel.shape,
            detail=f"input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}",
        )
    if bias.shape != (kernel.shape[0],):
        raise ShapeError("conv2d", kernel.shape, bias.shape, detail="bias must be [K]")

    n, c, h, w = x.shape
    k = kernel.shape[0]
    ho, wo = -(-h // stride), -(-w // stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, stride, ho, wo)
    wmat = kernel.data.reshape(k, c * 9)
    y = wmat @ cols
    y += bias.data[:, None]
    out = Tensor._wrap(np.ascontiguousarray(y.reshape(k, n, ho, wo).transpose(1, 0, 2, 3)))

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(k, n * ho * wo)
        gk = (g2 @ cols.T).reshape(kernel.shape)
        gb = g2.sum(axis=1)
        dcols = (wmat.T @ g2).reshape(c, 3, 3, n, ho, wo)
        dxp = np.zeros((c, n, h + 2, w + 2), dtype=dcols.dtype)
        hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for ky in range(3):
            for kx in range(3):
                dxp[:, :, ky:ky + hs:stride, kx:kx + ws:stride] += dcols[:, ky, kx]
        return dxp[:, :, 1:h + 1, 1:w + 1].transpose(1, 0, 2, 3), gk, gb

    return _record(out, (x, kernel, bias), bwd)


def pointwise_conv(x, weight, bias=None) -> Tensor:
    """1x1 convolution: ``[N, C, H, W]`` with weight ``[K, C]``."""
    x, weight = _to_tensor(x), _to_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError("pointwise_conv", x.shape, weight.shape)
    n, c, h, w = x.shape
    k = weight.shape[0]
    x3 = x.data.reshape(n, c, h * w)
    y = np.matmul(weight.data, x3)
    if bias is not None:
        bias = _to_tensor(bias)
        y += bias.data[:, None]
    out = Tensor._wrap(y.reshape(n, k, h, w))

    def bwd(g):
        g3 = g.reshape(n, k, h * w)
        gx = np.matmul(weight.data.T, g3).reshape(x.shape)
        gw = np.tensordot(g3, x3, axes=([0, 2], [0, 2]))
        if bias is None:
            return gx, gw
        return gx, gw, g3.sum(axis=(0, 2))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, inputs, bwd)


# ---------------------------------------------------------------------------
# normalization, attention, resampling


def group_norm(x, gamma, beta, groups: int = 8, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = _to_tensor(x), _to_tensor(gamma), _to_tensor(beta)
    n, c = x.shape[:2]
    if c % groups:
        raise ShapeError("group_norm", x.shape, detail=f"{c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("group_norm", x.shape, gamma.shape, beta.shape)
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1 / np.sqrt(var + x.dtype.type(eps))
    xhat = (xc * inv).reshape(x.shape)
    bshape = (1, c) + (1,) * (x.data.ndim - 2)
    out = Tensor._wrap(xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape))
    red = (0,) + tuple(range(2, x.data.ndim))

    def bwd(g):
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        dxhat = (g * gamma.data.reshape(bshape)).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        dx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True)
                    - xh * (dxhat * xh).mean(axis=2, keepdims=True))
        return dx.reshape(x.shape), ggamma, gbeta

    return _record(out, (x, gamma, beta), bwd)


def attention(q, k, v) -> Tensor:
    """Single-head scaled dot-product attention over ``[N, L, D]`` inputs."""
    q, k, v = _to_tensor(q), _to_tensor(k), _to_tensor(v)
    if not (q.shape == k.shape == v.shape) or q.data.ndim != 3 or q.shape[2] < 1:
        raise ShapeError("attention", q.shape, k.shape, v.shape, detail="q, k, v must share shape [N, L, D]")
    scl = q.dtype.type(1.0 / math.sqrt(q.shape[2]))
    s = np.matmul(q.data, np.swapaxes(k.data, 1, 2)) * scl
    s -= s.max(axis=2, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=2, keepdims=True)
    out = Tensor._wrap(np.matmul(p, v.data))

    def bwd(g):
        gv = np.matmul(np.swapaxes(p, 1, 2), g)
        dp = np.matmul(g, np.swapaxes(v.data, 1, 2))
        ds = p * (dp - (dp * p).sum(axis=2, keepdims=True)) * scl
        gq = np.matmul(ds, k.data)
        gk = np.matmul(np.swapaxes(ds, 1, 2), q.data)
        return gq, gk, gv

    return _record(out, (q, k, v), bwd)


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of ``[N, C, H, W]``."""
    x = _to_tensor(x)
    n, c, h, w = x.shape
    y = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)
    out = Tensor._wrap(np.ascontiguousarray(y))
    return _record(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def avg_pool(x, size: int) -> Tensor:
    """Non-overlapping ``size`` x ``size`` average pooling."""
    x = _to_tensor(x)
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError("avg_pool", x.shape, detail=f"spatial extents not divisible by {size}")
    y = x.data.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))
    out = Tensor._wrap(y)
    inv = x.dtype.type(1.0 / (size * size))

    def bwd(g):
        gx = np.broadcast_to((g * inv)[:, :, :, None, :, None], (n, c, h // size, size, w // size, size))
        return (gx.reshape(x.shape),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x,
    step: float = 1e-3,
    *,
    coords: int | Iterable[int] | None = None,
    seed: int = 0,
    fd_dtype=np.float64,
) -> float:
    """Largest relative error between reverse-mode and central differences.

    The analytic gradient is taken in the dtype of ``x``; the central
    differences are evaluated with ``x`` cast to ``fd_dtype`` (float64 by
    default) so that rounding in ``f`` does not swamp small coordinates.
    ``f`` must therefore build its graph in the dtype of its argument.

    ``coords`` limits the check to a subset of flat indices: an int draws that
    many distinct indices with ``seed``; ``None`` checks every coordinate.
    The relative error uses the denominator ``max(|a|, |b|, 1e-6)``.
    """
    if step <= 0:
        raise NumericsError(f"step must be positive, got {step}")
    x = np.asarray(_as_array(x))
    with GradTape() as tape:
        xt = tape.watch(Tensor(x))
        y = f(xt)
        if not isinstance(y, Tensor):
            raise NumericsError("f must return a Tensor")
        if not np.all(np.isfinite(y.data)):
            raise NumericsError("f produced a non-finite value")
        if tape.is_tracked(y):
            analytic = backward(tape, y)[xt].data.reshape(-1)
        else:
            analytic = np.zeros(x.size, dtype=x.dtype)

    if coords is None:
        idx = np.arange(x.size)
    elif isinstance(coords, (int, np.integer)):
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(x.size, size=min(int(coords), x.size), replace=False))
    else:
        idx = np.asarray(list(coords), dtype=np.int64)

    base = x.astype(fd_dtype).reshape(-1)
    worst = 0.0
    for i in idx:
        plus = base.copy()
        minus = base.copy()
        plus[i] += step
        minus[i] -= step
        fp = f(Tensor(plus.reshape(x.shape), dtype=fd_dtype)).data
        fm = f(Tensor(minus.reshape(x.shape), dtype=fd_dtype)).data
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NumericsError("f produced a non-finite value during finite differences")
        numeric = (float(fp) - float(fm)) / (2 * step)
        a = float(analytic[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        worst = max(worst, err)
    return worst
