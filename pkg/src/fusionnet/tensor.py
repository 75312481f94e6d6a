"""Dense N-dimensional tensors with reverse-mode automatic differentiation.

Values live in row-major numpy buffers (float32 by default, float64 for
gradient-check work). Differentiable ops record themselves on the active
``GradTape``; ``backward`` replays the tape in reverse execution order and
accumulates gradients into every participating tensor. Tapes are rebuilt
per forward pass (define-by-run), so a typical training step looks like::

    with GradTape() as tape:
        logits = model(x)
        loss = cross_entropy(logits, labels)
    backward(loss, tape)
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, ValidationError

_DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)


def set_default_dtype(dtype) -> None:
    """Set the element type used by new tensors (float32 or float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in _FLOAT_DTYPES:
        raise ValidationError(f"unsupported element type {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the default element type (used by gradient checks)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class RngState:
    """Deterministic random stream: same seed + same call sequence = same values.

    Backed by PCG64 through ``numpy.random.SeedSequence``, which guarantees
    stable output across platforms. ``child()`` derives an independent
    substream keyed by this state's spawn counter, so splits, weight init,
    augmentation, and shuffling can each own a stream without interfering.
    """

    def __init__(self, seed: int, _spawn_key: tuple = ()):
        self.seed = int(seed)
        self.counter = 0
        self._spawn_key = tuple(_spawn_key)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(entropy=self.seed, spawn_key=self._spawn_key))
        )

    def child(self) -> "RngState":
        derived = RngState(self.seed, self._spawn_key + (self.counter,))
        self.counter += 1
        return derived

    def normal(self, shape=None, std: float = 1.0, mean: float = 0.0) -> np.ndarray:
        return np.asarray(self._gen.normal(mean, std, shape), dtype=_DEFAULT_DTYPE)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=None) -> np.ndarray:
        return np.asarray(self._gen.uniform(low, high, shape), dtype=_DEFAULT_DTYPE)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self) -> float:
        return float(self._gen.random())

    def state_dict(self) -> dict:
        return {"seed": self.seed, "spawn_key": list(self._spawn_key), "counter": self.counter}

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, key={self._spawn_key}, counter={self.counter})"


class Tensor:
    """N-dimensional array with optional gradient buffer.

    ``data`` is the numpy value, ``grad`` (same shape, or None) the
    accumulated gradient. ``requires_grad`` marks leaves the user wants
    gradients for; op outputs get it set whenever they were recorded on
    the active tape. Op outputs are treated as immutable.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValidationError(f"item() needs a single-element tensor, got shape {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        grad = ", grad" if self.grad is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{grad})"

    # Arithmetic operators delegate to the module-level taped ops.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


class GradTape:
    """Ordered record of executed differentiable ops.

    Execution order is a valid topological order of the define-by-run
    graph, so replaying records in exact reverse order propagates
    gradients correctly. One forward/backward pass per tape.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __len__(self) -> int:
        return len(self._records)

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"

    def record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self._records.append((out, backward_fn))

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


_TAPE_STACK: list[GradTape] = []


def _active_tape() -> Optional[GradTape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: Tensor, tape: GradTape) -> None:
    """Populate gradients of everything on ``tape`` that ``loss`` depends on.

    ``loss`` must be a scalar produced while the tape was active. After the
    call every requires_grad tensor reachable from the loss holds
    d(loss)/d(tensor) in its ``grad`` buffer.
    """
    if loss.size != 1:
        raise ValidationError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValidationError("loss is not on the tape (no gradient path was recorded)")
    loss.grad = np.ones_like(loss.data)
    for out, backward_fn in reversed(tape._records):
        if out.grad is not None:
            backward_fn(out.grad)


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    if t.grad is None:
        t.grad = grad.astype(t.data.dtype, copy=True)
    else:
        t.grad += grad


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _binary_op(a, b, forward, grad_a, grad_b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = forward(a.data, b.data)
    tape = _active_tape()
    recorded = tape is not None and (a.requires_grad or b.requires_grad)
    out = Tensor(out_data, requires_grad=recorded)
    if recorded:
        def _bw(g, a=a, b=b):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(grad_a(g, a.data, b.data), a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(grad_b(g, a.data, b.data), b.shape))
        tape.record(out, _bw)
    return out


def _unary_op(x, forward, grad_x) -> Tensor:
    x = as_tensor(x)
    out_data = forward(x.data)
    tape = _active_tape()
    recorded = tape is not None and x.requires_grad
    out = Tensor(out_data, requires_grad=recorded)
    if recorded:
        def _bw(g, x=x, out=out):
            _accumulate(x, grad_x(g, x.data, out.data))
        tape.record(out, _bw)
    return out


def add(a, b) -> Tensor:
    return _binary_op(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary_op(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary_op(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary_op(
        a, b,
        lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def neg(x) -> Tensor:
    return _unary_op(x, lambda v: -v, lambda g, v, o: -g)


def exp(x) -> Tensor:
    return _unary_op(x, np.exp, lambda g, v, o: g * o)


def log(x) -> Tensor:
    return _unary_op(x, np.log, lambda g, v, o: g / v)


def sqrt(x) -> Tensor:
    return _unary_op(x, np.sqrt, lambda g, v, o: g * 0.5 / o)


def relu(x) -> Tensor:
    return _unary_op(x, lambda v: np.maximum(v, 0), lambda g, v, o: g * (v > 0))


def sigmoid(x) -> Tensor:
    return _unary_op(
        x,
        lambda v: 1.0 / (1.0 + np.exp(-v)),
        lambda g, v, o: g * o * (1.0 - o),
    )


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_forward(v: np.ndarray) -> np.ndarray:
    return 0.5 * v * (1.0 + np.tanh(_GELU_C * (v + 0.044715 * v ** 3)))


def _gelu_grad(g: np.ndarray, v: np.ndarray, o: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (v + 0.044715 * v ** 3))
    du = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
    return g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)


def gelu(x) -> Tensor:
    """Gaussian error linear unit (tanh form)."""
    return _unary_op(x, _gelu_forward, _gelu_grad)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def _bw_expand(g):
        if axis is None:
            return np.broadcast_to(g, x.shape)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, x.shape)

    return _unary_op(
        x,
        lambda v: v.sum(axis=axis, keepdims=keepdims),
        lambda g, v, o: _bw_expand(g),
    )


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= x.shape[ax]

    def _bw_expand(g):
        if axis is None:
            return np.broadcast_to(g / count, x.shape)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g / count, x.shape)

    return _unary_op(
        x,
        lambda v: v.mean(axis=axis, keepdims=keepdims),
        lambda g, v, o: _bw_expand(g),
    )


def matmul(a, b) -> Tensor:
    """Matrix product; leading batch dimensions broadcast like numpy matmul."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs 2+ dimensional operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def _swap(v):
        return np.swapaxes(v, -1, -2)

    return _binary_op(
        a, b,
        np.matmul,
        lambda g, x, y: np.matmul(g, _swap(y)),
        lambda g, x, y: np.matmul(_swap(x), g),
    )


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    target = shape
    known = 1
    for s in shape:
        if s != -1:
            known *= s
    if -1 in shape:
        if known == 0 or x.size % known:
            raise DimensionError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}")
    elif known != x.size:
        raise DimensionError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}")
    return _unary_op(
        x,
        lambda v: v.reshape(target),
        lambda g, v, o: g.reshape(v.shape),
    )


def flatten(x, from_axis: int = 1) -> Tensor:
    """Merge all dimensions from ``from_axis`` onward into one."""
    x = as_tensor(x)
    if not 0 <= from_axis < x.ndim:
        raise DimensionError(f"flatten axis {from_axis} out of range for shape {x.shape}")
    lead = x.shape[:from_axis]
    tail = int(np.prod(x.shape[from_axis:], dtype=np.int64)) if x.ndim > from_axis else 1
    return reshape(x, lead + (tail,))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _unary_op(
        x,
        lambda v: np.transpose(v, axes),
        lambda g, v, o: np.transpose(g, inverse),
    )


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    """Concatenate tensors along ``axis``; all other extents must agree."""
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise DimensionError("concat needs at least one input")
    base = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(base) or any(
            o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis % len(base)
        ):
            raise DimensionError(f"concat shapes differ off-axis: {xs[0].shape} vs {x.shape}")
    out_data = np.concatenate([x.data for x in xs], axis=axis)
    tape = _active_tape()
    recorded = tape is not None and any(x.requires_grad for x in xs)
    out = Tensor(out_data, requires_grad=recorded)
    if recorded:
        sizes = [x.shape[axis] for x in xs]
        offsets = np.cumsum(sizes)[:-1]

        def _bw(g):
            for x, piece in zip(xs, np.split(g, offsets, axis=axis)):
                if x.requires_grad:
                    _accumulate(x, piece)
        tape.record(out, _bw)
    return out


def softmax(x, axis: int = -1) -> Tensor:
    """Row-stochastic exponential normalization, computed with max subtraction."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {x.shape}")

    def _forward(v):
        shifted = v - v.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=axis, keepdims=True)

    return _unary_op(
        x,
        _forward,
        lambda g, v, o: o * (g - (g * o).sum(axis=axis, keepdims=True)),
    )


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over the batch, from logits via log-sum-exp."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (batch, classes) logits, got {logits.shape}")
    labels = np.asarray(labels)
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise ValidationError(f"labels shape {labels.shape} does not match batch {batch}")
    if labels.min() < 0 or labels.max() >= classes:
        raise ValidationError(f"labels must lie in [0, {classes}), got range "
                              f"[{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.int64)

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    losses = lse - z[np.arange(batch), labels]
    out_data = np.asarray(losses.mean(), dtype=z.dtype)

    tape = _active_tape()
    recorded = tape is not None and logits.requires_grad
    out = Tensor(out_data, requires_grad=recorded)
    if recorded:
        def _bw(g):
            p = np.exp(z - zmax)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(batch), labels] -= 1.0
            _accumulate(logits, (g * p / batch).astype(z.dtype))
        tape.record(out, _bw)
    return out


def _check_conv_pre(x_shape, w_shape, stride: int, pad: int, groups: int) -> None:
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x_shape} and {w_shape}")
    batch, channels, height, width = x_shape
    filters, per_group, kh, kw = w_shape
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    if channels % groups or filters % groups:
        raise DimensionError(
            f"channels {channels} and filters {filters} must divide groups {groups}")
    if per_group != channels // groups:
        raise DimensionError(
            f"weight expects {per_group} channels per group, input supplies {channels // groups}"
            f" (input {x_shape}, weight {w_shape})")
    if kh > height + 2 * pad or kw > width + 2 * pad:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {height + 2 * pad}x{width + 2 * pad}"
            f" (input {x_shape}, weight {w_shape})")


def conv2d(x, w, stride: int = 1, pad: int = 0, groups: int = 1) -> Tensor:
    """2-d cross-correlation with zero padding.

    ``x`` is (B, C, H, W), ``w`` is (F, C/groups, kh, kw); output spatial
    extent is floor((H + 2*pad - kh)/stride) + 1. ``groups=C`` with
    single-channel filters gives a depthwise convolution.
    """
    x, w = as_tensor(x), as_tensor(w)
    _check_conv_pre(x.shape, w.shape, stride, pad, groups)
    batch, channels, height, width = x.shape
    filters, _, kh, kw = w.shape
    out_h = (height + 2 * pad - kh) // stride + 1
    out_w = (width + 2 * pad - kw) // stride + 1
    cg = channels // groups
    fg = filters // groups

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    xg = xp.reshape(batch, groups, cg, xp.shape[2], xp.shape[3])
    wg = w.data.reshape(groups, fg, cg, kh, kw)

    out_data = np.zeros((batch, groups, fg, out_h, out_w), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xg[:, :, :, i:i + out_h * stride:stride, j:j + out_w * stride:stride]
            out_data += np.einsum("bgchw,gfc->bgfhw", patch, wg[:, :, :, i, j])
    out_data = out_data.reshape(batch, filters, out_h, out_w)

    tape = _active_tape()
    recorded = tape is not None and (x.requires_grad or w.requires_grad)
    out = Tensor(out_data, requires_grad=recorded)
    if recorded:
        def _bw(g):
            gg = g.reshape(batch, groups, fg, out_h, out_w)
            if x.requires_grad:
                dxp = np.zeros_like(xg)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, :, i:i + out_h * stride:stride, j:j + out_w * stride:stride] += \
                            np.einsum("bgfhw,gfc->bgchw", gg, wg[:, :, :, i, j])
                dx = dxp.reshape(batch, channels, xp.shape[2], xp.shape[3])
                if pad:
                    dx = dx[:, :, pad:pad + height, pad:pad + width]
                _accumulate(x, dx)
            if w.requires_grad:
                dw = np.zeros_like(wg)
                for i in range(kh):
                    for j in range(kw):
                        patch = xg[:, :, :, i:i + out_h * stride:stride,
                                   j:j + out_w * stride:stride]
                        dw[:, :, :, i, j] = np.einsum("bgfhw,bgchw->gfc", gg, patch)
                _accumulate(w, dw.reshape(w.shape))
        tape.record(out, _bw)
    return out


def maxpool2d(x, kernel: int = 3, stride: int = 2, pad: int = 1) -> Tensor:
    """Max pooling; padding uses -inf so it never wins the max."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects 4-d input, got {x.shape}")
    batch, channels, height, width = x.shape
    if kernel > height + 2 * pad or kernel > width + 2 * pad:
        raise DimensionError(
            f"pool kernel {kernel} larger than padded input "
            f"{height + 2 * pad}x{width + 2 * pad}")
    out_h = (height + 2 * pad - kernel) // stride + 1
    out_w = (width + 2 * pad - kernel) // stride + 1

    if pad:
        xp = np.full((batch, channels, height + 2 * pad, width + 2 * pad),
                     -np.inf, dtype=x.data.dtype)
        xp[:, :, pad:pad + height, pad:pad + width] = x.data
    else:
        xp = x.data

    windows = np.stack(
        [xp[:, :, i:i + out_h * stride:stride, j:j + out_w * stride:stride]
         for i in range(kernel) for j in range(kernel)],
        axis=-1,
    )
    winner = windows.argmax(axis=-1)
    out_data = np.take_along_axis(windows, winner[..., None], axis=-1)[..., 0]

    tape = _active_tape()
    recorded = tape is not None and x.requires_grad
    out = Tensor(out_data, requires_grad=recorded)
    if recorded:
        def _bw(g):
            dxp = np.zeros_like(xp)
            for idx in range(kernel * kernel):
                mask = winner == idx
                if not mask.any():
                    continue
                i, j = divmod(idx, kernel)
                dxp[:, :, i:i + out_h * stride:stride, j:j + out_w * stride:stride] += g * mask
            dx = dxp[:, :, pad:pad + height, pad:pad + width] if pad else dxp
            _accumulate(x, dx)
        tape.record(out, _bw)
    return out


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE))


def ones(shape, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _DEFAULT_DTYPE))
