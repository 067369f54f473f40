"""Small dense-array engine with tape-based reverse-mode differentiation.

Everything is float64 numpy underneath. Operations only record onto a
:class:`GradTape` when one is active and at least one input requires a
gradient, so inference runs without any bookkeeping.

    with GradTape() as tape:
        y = (x @ w).sum()
    gx, gw = tape.gradient(y, [x, w])
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Array:
    """Immutable float64 array that may participate in a gradient tape."""

    __slots__ = ("data", "requires_grad")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, check: bool = True):
        arr = np.array(data, dtype=np.float64)
        if check and not np.all(np.isfinite(arr)):
            raise ValueError("Array contains non-finite values")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool = False) -> "Array":
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        data.flags.writeable = False
        out.data = data
        out.requires_grad = requires_grad
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Array({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_array(x) -> Array:
    return x if isinstance(x, Array) else Array._wrap(np.asarray(x, dtype=np.float64))


class GradTape:
    """Ordered record of differentiable operations.

    Entries are appended in execution order, which is a topological order
    of the computation graph; :meth:`gradient` replays it in reverse.
    """

    def __init__(self):
        self.entries: list[tuple[Array, tuple[Array, ...], Callable]] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().remove(self)

    def __len__(self) -> int:
        return len(self.entries)

    def gradient(self, target: Array, sources: Sequence[Array]) -> list[np.ndarray]:
        if target.size != 1:
            raise ValueError("gradient target must be a scalar")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for out, parents, vjp in reversed(self.entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return [
            np.array(grads[id(s)]) if id(s) in grads else np.zeros_like(s.data)
            for s in sources
        ]


def _record(data: np.ndarray, parents: tuple, vjp: Callable) -> Array:
    stack = _local.__dict__.get("stack")
    if stack and any(p.requires_grad for p in parents):
        out = Array._wrap(data, requires_grad=True)
        stack[-1].entries.append((out, parents, vjp))
        return out
    return Array._wrap(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def stop_gradient(x: Array) -> Array:
    """Same values, cut from the tape: nothing upstream receives gradient."""
    return Array._wrap(as_array(x).data)


# elementwise -----------------------------------------------------------------


def add(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    out = a.data / b.data
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def power(a, p: float) -> Array:
    a = as_array(a)
    out = a.data**p
    return _record(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Array:
    a = as_array(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Array:
    a = as_array(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Array:
    a = as_array(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Array:
    a = as_array(a)
    out = stable_sigmoid(a.data)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(a) -> Array:
    """log(1 + e^x), computed without overflow."""
    a = as_array(a)
    out = np.logaddexp(0.0, a.data)
    return _record(out, (a,), lambda g: (g * stable_sigmoid(a.data),))


def relu(a) -> Array:
    a = as_array(a)
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Array:
    # tanh approximation
    a = as_array(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _record(out, (a,), vjp)


def maximum(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    pick = a.data >= b.data
    return _record(
        np.where(pick, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick, a.shape), _unbroadcast(g * ~pick, b.shape)),
    )


def minimum(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    pick = a.data <= b.data
    return _record(
        np.where(pick, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick, a.shape), _unbroadcast(g * ~pick, b.shape)),
    )


# reductions and shape ----------------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Array:
    a = as_array(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _record(out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Array:
    a = as_array(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Array:
    a = as_array(a)
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Array:
    a = as_array(a)
    inv = None if axes is None else np.argsort(axes)
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx) -> Array:
    a = as_array(a)
    basic = _is_basic_index(idx)

    def vjp(g):
        full = np.zeros(a.shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _record(a.data[idx], (a,), vjp)


def concat(arrays: Sequence, axis: int = 0) -> Array:
    arrays = tuple(as_array(x) for x in arrays)
    sizes = [x.shape[axis] for x in arrays]
    splits = np.cumsum(sizes)[:-1]
    return _record(
        np.concatenate([x.data for x in arrays], axis=axis),
        arrays,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def take_columns(table, idx: np.ndarray) -> Array:
    """``table[:, idx]`` for a 2-D table and an integer index array."""
    table = as_array(table)
    rows, ncols = table.shape

    def vjp(g):
        flat = idx.ravel()
        gt = np.empty((rows, ncols))
        for r in range(rows):
            gt[r] = np.bincount(flat, weights=g[r].ravel(), minlength=ncols)
        return (gt,)

    return _record(table.data[:, idx], (table,), vjp)


# linear algebra ----------------------------------------------------------------


def matmul(a, b) -> Array:
    """Matrix product, batched over leading axes as ``np.matmul`` does."""
    a, b = as_array(a), as_array(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(a.data @ b.data, (a, b), vjp)


def masked_softmax(x, mask, strict: bool = True) -> Array:
    """Softmax over the last axis with an additive 0 / -inf visibility mask.

    Hidden entries come out exactly zero. With ``strict=False`` rows with
    no visible entry produce all zeros instead of raising.
    """
    x = as_array(x)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape[-1] != x.shape[-1]:
        raise ValueError(f"mask last axis {mask.shape[-1]} != {x.shape[-1]}")
    visible = np.isfinite(mask)
    empty = ~visible.any(axis=-1)
    if empty.any():
        if strict:
            raise ValueError("masked_softmax: row with no visible entry")
        mask = np.where(empty[..., None], 0.0, mask)
    z = x.data + mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    if empty.any():
        out = np.where(np.broadcast_to(empty[..., None], out.shape), 0.0, out)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Array:
    x, gain, bias = as_array(x), as_array(gain), as_array(bias)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        gx_hat = g * gain.data
        gx = inv / d * (
            d * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), vjp)


def conv_output_length(length: int, stride: int) -> int:
    return -(-length // stride)


def temporal_conv1d(x, kernel, stride: int = 1) -> Array:
    """1-D convolution over time with symmetric zero padding of ``w // 2``.

    ``x`` is (T, d_in), ``kernel`` is (w, d_in, d_out) with odd ``w``. Output
    row ``t`` is centred on input row ``t * stride``, so there are
    ``ceil(T / stride)`` rows.
    """
    x, kernel = as_array(x), as_array(kernel)
    w, d_in, d_out = kernel.shape
    if w % 2 == 0:
        raise ValueError(f"kernel width must be odd, got {w}")
    if stride < 1:
        raise ValueError("stride must be positive")
    T = x.shape[0]
    if x.shape[1] != d_in:
        raise ValueError(f"channel mismatch: {x.shape[1]} vs kernel {d_in}")
    pad = w // 2
    n_out = conv_output_length(T, stride)
    xp = np.zeros((T + 2 * pad, d_in))
    xp[pad : pad + T] = x.data
    span = stride * (n_out - 1) + 1
    cols = np.stack([xp[k : k + span : stride] for k in range(w)], axis=1)
    cols2 = cols.reshape(n_out, w * d_in)
    kmat = kernel.data.reshape(w * d_in, d_out)

    def vjp(g):
        gk = (cols2.T @ g).reshape(kernel.shape)
        gcols = (g @ kmat.T).reshape(n_out, w, d_in)
        gxp = np.zeros_like(xp)
        for k in range(w):
            gxp[k : k + span : stride] += gcols[:, k]
        return gxp[pad : pad + T], gk

    return _record(cols2 @ kmat, (x, kernel), vjp)


# gradient oracle -----------------------------------------------------------------


def finite_difference_gradient(f: Callable, x, h: float = 1e-6) -> np.ndarray:
    """Central-difference estimate of the gradient of scalar ``f`` at ``x``."""
    base = np.array(as_array(x).data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f(Array._wrap(base.copy())))
        flat[i] = orig - h
        fm = _scalar(f(Array._wrap(base.copy())))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ValueError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def _scalar(v) -> float:
    return float(v.data) if isinstance(v, Array) else float(v)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation scaled by the larger gradient's max magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradient(f: Callable, x, h: float = 1e-6) -> float:
    """Relative error between tape gradient and central differences of ``f`` at ``x``."""
    x = Array._wrap(as_array(x).data.copy(), requires_grad=True)
    with GradTape() as tape:
        y = f(x)
    (analytic,) = tape.gradient(y, [x])
    return relative_error(analytic, finite_difference_gradient(f, x, h))
