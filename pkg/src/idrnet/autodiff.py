"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Operations are :class:`Function` subclasses.  Calling ``SomeOp.apply(...)``
computes the forward result and, when a :class:`Tape` is active and any input
requires gradients, appends a record to that tape.  ``tape.backward(root)``
replays the records in reverse order.

Negative infinity (``NEG_INF``) is the masking sentinel understood by
:func:`masked_softmax`; it is a true ``-inf``, never a large finite number.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

NEG_INF = -np.inf
IGNORE_INDEX = 255


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class DegenerateRowError(ValueError):
    """A softmax row holds nothing but the masking sentinel."""


class LabelRangeError(ValueError):
    """A label lies outside ``[0, K)`` and is not the ignore sentinel."""


class DeterminismError(RuntimeError):
    """Two evaluations of the same program disagreed."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return Index.apply(self, index=index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        return Transpose.apply(self, axes=axes or None)

    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


@dataclass
class Record:
    fn: "Function"
    inputs: tuple[Tensor, ...]
    output: Tensor


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations; use as a context manager."""

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def backward(self, root: Tensor) -> None:
        if root.data.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        touched: dict[int, Tensor] = {id(root): root}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            rec.output.grad = g
            in_grads = rec.fn.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                touched[key] = t
        # whatever is left in `grads` belongs to tensors no record produced: leaves
        for key, g in grads.items():
            t = touched[key]
            t.grad = g.copy() if t.grad is None else t.grad + g


class no_grad:
    """Suspend recording; operations inside build no tape entries."""

    def __enter__(self):
        _stack().append(None)

    def __exit__(self, *exc):
        _stack().pop()
        return False


# ---------------------------------------------------------------------------
# functions


class Function:
    """Base class of every differentiable operation.

    ``forward`` receives raw arrays plus keyword options and may stash whatever
    ``backward`` needs on ``self``.  ``backward`` returns one gradient (or
    ``None``) per positional input.
    """

    differentiable = True
    needs_grad: tuple = ()

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        fn = cls()
        fn.needs_grad = tuple(t.requires_grad for t in tensors)
        out = Tensor(fn.forward(*(t.data for t in tensors), **kwargs))
        tape = active_tape()
        if tape is not None and cls.differentiable and any(t.requires_grad for t in tensors):
            out.requires_grad = True
            tape.records.append(Record(fn, tensors, out))
        return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Add(Function):
    def forward(self, a, b):
        self.shapes = a.shape, b.shape
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return _unbroadcast(g * self.b, self.a.shape), _unbroadcast(g * self.a, self.b.shape)


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, g):
        return (g * self.mask,)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        ga = g @ np.swapaxes(self.b, -1, -2)
        gb = np.swapaxes(self.a, -1, -2) @ g
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


class Reshape(Function):
    def forward(self, x, shape):
        self.in_shape = x.shape
        return x.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.in_shape),)


class Transpose(Function):
    def forward(self, x, axes=None):
        axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
        self.inverse = tuple(np.argsort(axes))
        return np.transpose(x, axes)

    def backward(self, g):
        return (np.transpose(g, self.inverse),)


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.in_shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, self.in_shape).copy(),)


class Mean(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.in_shape, self.axis, self.keepdims = x.shape, axis, keepdims
        n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
        self.n = n
        return np.asarray(x.mean(axis=axis, keepdims=keepdims))

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g / self.n, self.in_shape).copy(),)


class BroadcastTo(Function):
    def forward(self, x, shape):
        self.in_shape = x.shape
        return np.broadcast_to(x, shape).copy()

    def backward(self, g):
        return (_unbroadcast(g, self.in_shape),)


class Concat(Function):
    def forward(self, *xs, axis=0):
        self.axis = axis
        self.splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return np.concatenate(xs, axis=axis)

    def backward(self, g):
        return tuple(np.split(g, self.splits, axis=self.axis))


class Stack(Function):
    def forward(self, *xs, axis=0):
        self.axis = axis
        return np.stack(xs, axis=axis)

    def backward(self, g):
        return tuple(np.moveaxis(g, self.axis, 0))


class Index(Function):
    """``x[index]`` for basic or integer-array indices."""

    def forward(self, x, index):
        self.in_shape, self.index = x.shape, index
        return np.array(x[index])

    def backward(self, g):
        out = np.zeros(self.in_shape)
        np.add.at(out, self.index, g)
        return (out,)


class Softmax(Function):
    def forward(self, x, axis=-1):
        self.axis = axis
        z = x - x.max(axis=axis, keepdims=True)
        e = np.exp(z)
        self.y = e / e.sum(axis=axis, keepdims=True)
        return self.y

    def backward(self, g):
        y = self.y
        return (y * (g - (g * y).sum(axis=self.axis, keepdims=True)),)


class MaskedSoftmax(Softmax):
    """Softmax treating ``-inf`` entries as exact zeros of the output."""

    def forward(self, x, axis=-1):
        finite = np.isfinite(x)
        if not finite.any(axis=axis).all():
            raise DegenerateRowError("masked_softmax: a row is entirely masked")
        self.axis = axis
        peak = np.where(finite, x, -np.inf).max(axis=axis, keepdims=True)
        e = np.where(finite, np.exp(np.where(finite, x - peak, 0.0)), 0.0)
        self.y = e / e.sum(axis=axis, keepdims=True)
        return self.y


class CrossEntropyMap(Function):
    """Per-pixel ``-log softmax(logits)[label]`` over the channel axis 1.

    ``logits`` is ``[B, K, H, W]`` and ``labels`` ``[B, H, W]``; ignored pixels
    get zero loss and zero gradient.
    """

    def forward(self, logits, labels, ignore_index=IGNORE_INDEX):
        labels = np.asarray(labels)
        k = logits.shape[1]
        valid = labels != ignore_index
        if np.any(labels[valid] >= k) or np.any(labels[valid] < 0):
            raise LabelRangeError(f"labels must lie in [0, {k}) or equal {ignore_index}")
        safe = np.where(valid, labels, 0).astype(np.intp)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        s = e.sum(axis=1, keepdims=True)
        self.p = e / s
        self.valid, self.safe = valid, safe
        picked = np.take_along_axis(z, safe[:, None], axis=1)[:, 0]
        return np.where(valid, np.log(s[:, 0]) - picked, 0.0)

    def backward(self, g):
        d = self.p.copy()
        onehot = np.zeros_like(d)
        np.put_along_axis(onehot, self.safe[:, None], 1.0, axis=1)
        d -= onehot
        d *= (g * self.valid)[:, None]
        return (d,)


class Conv2d(Function):
    """Square-kernel convolution, NCHW layout, zero padding of ``k // 2``.

    Columns are laid out ``[C*k*k, N*Ho*Wo]`` so each pass is a single GEMM.
    """

    def forward(self, x, w, b, stride=1):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
        n, c, h, wd = x.shape
        o, _, k, _ = w.shape
        p = k // 2
        ho = (h + 2 * p - k) // stride + 1
        wo = (wd + 2 * p - k) // stride + 1
        xt = x.transpose(1, 0, 2, 3)
        if p:
            xp = np.zeros((c, n, h + 2 * p, wd + 2 * p))
            xp[:, :, p:p + h, p:p + wd] = xt
        else:
            xp = xt
        cols = np.empty((c, k, k, n, ho, wo))
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
        cols = cols.reshape(c * k * k, n * ho * wo)
        self.cols, self.w, self.meta = cols, w, (x.shape, stride, p, ho, wo)
        out = w.reshape(o, -1) @ cols
        out += b[:, None]
        return out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    def backward(self, g):
        (n, c, h, wd), stride, p, ho, wo = self.meta
        o, _, k, _ = self.w.shape
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
        gw = (g2 @ self.cols.T).reshape(self.w.shape)
        gb = g2.sum(axis=1)
        if self.needs_grad and not self.needs_grad[0]:
            return None, gw, gb
        dcols = (self.w.reshape(o, -1).T @ g2).reshape(c, k, k, n, ho, wo)
        dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
        dxt = dxp.transpose(1, 0, 2, 3)
        for i in range(k):
            for j in range(k):
                dxt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
        dx = dxp[:, :, p:p + h, p:p + wd] if p else dxp
        return dx, gw, gb


def interp_taps(n_in: int, n_out: int):
    """Half-pixel-centre linear interpolation taps (align_corners=False).

    Returns ``(lo, hi, frac)`` so that ``out[i] = x[lo] + frac * (x[hi] - x[lo])``.
    """
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def _lerp_axis(x, taps, axis):
    lo, hi, f = taps
    shape = [1] * x.ndim
    shape[axis] = -1
    x_lo = np.take(x, lo, axis=axis)
    # lerp form keeps constant inputs exactly constant
    return x_lo + f.reshape(shape) * (np.take(x, hi, axis=axis) - x_lo)


def _lerp_axis_backward(g, taps, axis, n_in):
    lo, hi, f = taps
    shape = [1] * g.ndim
    shape[axis] = -1
    f = f.reshape(shape)
    out_shape = list(g.shape)
    out_shape[axis] = n_in
    out = np.zeros(out_shape)
    idx_lo = [slice(None)] * g.ndim
    idx_lo[axis] = lo
    idx_hi = list(idx_lo)
    idx_hi[axis] = hi
    np.add.at(out, tuple(idx_lo), g * (1.0 - f))
    np.add.at(out, tuple(idx_hi), g * f)
    return out


def resize_bilinear(x: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Plain-array bilinear resize of the last two axes."""
    h, w = x.shape[-2:]
    y = _lerp_axis(x, interp_taps(h, size[0]), x.ndim - 2)
    return _lerp_axis(y, interp_taps(w, size[1]), x.ndim - 1)


class UpsampleBilinear(Function):
    def forward(self, x, size):
        h, w = x.shape[-2:]
        self.in_hw = h, w
        self.taps = interp_taps(h, size[0]), interp_taps(w, size[1])
        y = _lerp_axis(x, self.taps[0], x.ndim - 2)
        return _lerp_axis(y, self.taps[1], x.ndim - 1)

    def backward(self, g):
        h, w = self.in_hw
        g = _lerp_axis_backward(g, self.taps[1], g.ndim - 1, w)
        return (_lerp_axis_backward(g, self.taps[0], g.ndim - 2, h),)


# ---------------------------------------------------------------------------
# functional front end


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def relu(x) -> Tensor:
    return ReLU.apply(x)


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*xs, axis=axis)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Stack.apply(*xs, axis=axis)


def mean(x, axis=None, keepdims=False) -> Tensor:
    return Mean.apply(x, axis=axis, keepdims=keepdims)


def broadcast_to(x, shape) -> Tensor:
    return BroadcastTo.apply(x, shape=tuple(shape))


def softmax(x, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def masked_softmax(x, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with ``-inf`` entries mapped to exactly zero.

    Raises :class:`DegenerateRowError` when a row is fully masked.
    """
    return MaskedSoftmax.apply(x, axis=axis)


def conv2d(x, w, b, stride: int = 1) -> Tensor:
    return Conv2d.apply(x, w, b, stride=stride)


def upsample_bilinear(x, size: tuple[int, int]) -> Tensor:
    return UpsampleBilinear.apply(x, size=tuple(size))


def cross_entropy_map(logits, labels, ignore_index: int = IGNORE_INDEX):
    """Return ``(loss_map, mean_loss)``.

    ``logits`` may be ``[K, H, W]`` or ``[B, K, H, W]``; the map has the shape of
    ``labels``.  The mean covers non-ignored pixels only and is 0 when none are.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    single = logits.ndim == 3
    if single:
        logits = logits.reshape((1,) + logits.shape)
        labels = labels[None]
    if logits.shape[2:] != labels.shape[1:] or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"cross_entropy_map: logits {logits.shape} vs labels {labels.shape}")
    lmap = CrossEntropyMap.apply(logits, labels=labels, ignore_index=ignore_index)
    count = int((labels != ignore_index).sum())
    total = lmap.sum()
    loss = mul(total, 1.0 / count) if count else mul(total, 0.0)
    if single:
        lmap = lmap.reshape(lmap.shape[1:])
    return lmap, loss


def argmax_channels(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Argmax with the lowest index winning ties (numpy's own rule)."""
    return np.argmax(np.asarray(x), axis=axis)


def downsample_nearest(labels: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour label downsampling, half-pixel convention.

    Output pixel ``i`` reads source ``floor((i + 0.5) * factor)``.
    """
    labels = np.asarray(labels)
    off = factor // 2
    return labels[..., off::factor, off::factor].copy()


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckResult:
    max_rel_error: float
    input_index: int
    coordinate: tuple


def relative_error(analytic, numeric, floor: float = 1e-6):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_difference_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckResult:
    """Compare tape gradients of scalar ``f(*inputs)`` against central differences.

    Only inputs with ``requires_grad`` are probed.  ``max_coords`` limits the
    number of randomly chosen coordinates per input.  The relative error uses
    ``max(|a|, |n|, floor)`` as denominator so exact zeros compare sanely.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        out = f(*inputs)
    with no_grad():
        again = f(*inputs)
    if not np.array_equal(out.data, again.data):
        raise DeterminismError("program returned different values on repeated evaluation")
    tape.backward(out)

    rng = np.random.default_rng(seed)
    worst = GradCheckResult(0.0, -1, ())
    for pos, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat_idx = np.arange(t.data.size)
        if max_coords is not None and t.data.size > max_coords:
            flat_idx = np.sort(rng.choice(t.data.size, size=max_coords, replace=False))
        for fi in flat_idx:
            coord = np.unravel_index(fi, t.data.shape)
            orig = t.data[coord]
            with no_grad():
                t.data[coord] = orig + eps
                up = float(f(*inputs).data)
                t.data[coord] = orig - eps
                down = float(f(*inputs).data)
            t.data[coord] = orig
            numeric = (up - down) / (2 * eps)
            err = float(relative_error(analytic[coord], numeric, floor))
            if err > worst.max_rel_error or worst.input_index < 0:
                worst = GradCheckResult(err, pos, tuple(int(c) for c in coord))
    return worst
