"""Dense 64-bit tensors with a reverse-mode gradient tape.

Layout is row-major with ``(B, C, H, W)`` axis order for image tensors.
Every differentiable operation executed while gradients are enabled is
appended to the active :class:`Tape`; :func:`backward` replays the tape in
reverse execution order.

Only leaf tensors created with ``requires_grad=True`` hold a ``grad``
buffer.  Gradients accumulate across calls to :func:`backward`; callers
(normally the optimizer) zero them explicitly.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .exceptions import ConfigurationError, TapeError, UsageError

__all__ = [
    "Tensor",
    "Tape",
    "RunningStats",
    "get_tape",
    "using_tape",
    "no_grad",
    "backward",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "square",
    "log_softmax",
    "softmax",
    "tensor_sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "slice_tensor",
    "spatial_downsample",
    "conv2d",
    "conv2d_transpose",
    "batch_norm",
    "conv_output_size",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------


@dataclass
class _Node:
    out: "Tensor"
    parents: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self.generation = 0

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: "Tensor", parents: tuple, backward_fn) -> None:
        out._tape = self
        out._generation = self.generation
        out._index = len(self._nodes)
        self._nodes.append(_Node(out, parents, backward_fn))

    def clear(self) -> None:
        """Drop every recorded operation; outputs recorded so far become stale."""
        self._nodes.clear()
        self.generation += 1


class _State(threading.local):
    def __init__(self) -> None:
        self.tape = Tape()
        self.enabled = True


_state = _State()


def get_tape() -> Tape:
    return _state.tape


@contextmanager
def using_tape(tape: Tape) -> Iterator[Tape]:
    previous = _state.tape
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = previous


@contextmanager
def no_grad() -> Iterator[None]:
    previous = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


# --------------------------------------------------------------------------
# tensor
# --------------------------------------------------------------------------


class Tensor:
    """n-dimensional float64 array that can take part in the gradient tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._tape: Tape | None = None
        self._generation = -1
        self._index = -1

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.asarray(arr, dtype=np.float64)
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._tape = None
        t._generation = -1
        t._index = -1
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._index < 0

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy(), False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        return neg(self)

    def __getitem__(self, index):
        return slice_tensor(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(arr: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    needs = _state.enabled and any(p.requires_grad for p in parents)
    out = Tensor._wrap(arr, needs)
    if needs:
        _state.tape.record(out, parents, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Calling twice without zeroing sums the gradients of both calls.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.is_leaf:
        loss.grad += 1.0
        return
    tape = loss._tape
    if tape is None or loss._generation != tape.generation or loss._index >= len(tape):
        raise TapeError("loss was recorded on a tape that has since been cleared")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape._nodes[: loss._index + 1]):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.is_leaf:
                parent.grad += pg
            else:
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ConfigurationError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _binary(a, b, op: str):
    a_is, b_is = isinstance(a, Tensor), isinstance(b, Tensor)
    if a_is and b_is:
        _check_same(a, b, op)
    return a_is, b_is


def add(a, b) -> Tensor:
    a_is, b_is = _binary(a, b, "add")
    if a_is and b_is:
        return _result(a.data + b.data, (a, b),
                       lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))
    t, s = (a, float(b)) if a_is else (b, float(a))
    return _result(t.data + s, (t,), lambda g: (g,))


def sub(a, b) -> Tensor:
    a_is, b_is = _binary(a, b, "sub")
    if a_is and b_is:
        return _result(a.data - b.data, (a, b),
                       lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))
    if a_is:
        return _result(a.data - float(b), (a,), lambda g: (g,))
    return _result(float(a) - b.data, (b,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a_is, b_is = _binary(a, b, "mul")
    if a_is and b_is:
        ad, bd = a.data, b.data
        return _result(ad * bd, (a, b),
                       lambda g: (_reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)))
    t, s = (a, float(b)) if a_is else (b, float(a))
    return _result(t.data * s, (t,), lambda g: (g * s,))


def div(a, b) -> Tensor:
    a_is, b_is = _binary(a, b, "div")
    if a_is and b_is:
        ad, bd = a.data, b.data
        out = ad / bd
        return _result(out, (a, b),
                       lambda g: (_reduce_to(g / bd, a.shape), _reduce_to(-g * out / bd, b.shape)))
    if a_is:
        s = float(b)
        return _result(a.data / s, (a,), lambda g: (g / s,))
    s = float(a)
    bd = b.data
    out = s / bd
    return _result(out, (b,), lambda g: (-g * out / bd,))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _result(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _result(x * x, (a,), lambda g: (2.0 * g * x,))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _result(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis=axis))


# --------------------------------------------------------------------------
# reductions and reshaping
# --------------------------------------------------------------------------


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out), (a,), grad)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ConfigurationError(f"cannot reshape {a.shape} to {shape}") from exc
    old = a.shape
    return _result(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Join along ``axis`` (channel axis by default)."""
    tensors = list(tensors)
    if not tensors:
        raise ConfigurationError("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[d] != ref[d] for d in range(len(ref)) if d != ax
        ):
            raise ConfigurationError(f"concat: incompatible shapes {ref} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def grad(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return parts

    return _result(out, tuple(tensors), grad)


def slice_tensor(a: Tensor, index) -> Tensor:
    """Basic (non-advanced) indexing with a differentiable scatter back."""
    out = a.data[index]
    shape = a.shape

    def grad(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _result(np.array(out), (a,), grad)


def spatial_downsample(a: Tensor, target_hw) -> Tensor:
    """Average-pool disjoint windows of a ``(B, C, H, W)`` tensor to ``target_hw``."""
    b, c, h, w = a.shape
    th, tw = (target_hw, target_hw) if isinstance(target_hw, int) else target_hw
    if th <= 0 or tw <= 0 or h % th or w % tw:
        raise ConfigurationError(f"cannot downsample {h}x{w} to {th}x{tw} without remainder")
    fh, fw = h // th, w // tw
    if fh == 1 and fw == 1:
        return a
    out = a.data.reshape(b, c, th, fh, tw, fw).mean(axis=(3, 5))
    scale = 1.0 / (fh * fw)

    def grad(g):
        g6 = np.broadcast_to(g[:, :, :, None, :, None] * scale, (b, c, th, fh, tw, fw))
        return (g6.reshape(b, c, h, w),)

    return _result(out, (a,), grad)


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _nhwc_padded(a: np.ndarray, pad_lo: int, pad_hi: int | None = None) -> np.ndarray:
    """``(B, C, H, W)`` -> zero-padded channels-last copy ``(B, H+p, W+p, C)``."""
    pad_hi = pad_lo if pad_hi is None else pad_hi
    b, c, h, w = a.shape
    out = np.zeros((b, h + pad_lo + pad_hi, w + pad_lo + pad_hi, c))
    out[:, pad_lo:pad_lo + h, pad_lo:pad_lo + w, :] = a.transpose(0, 2, 3, 1)
    return out


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """im2col matrix ``(B*Ho*Wo, k*k*C)`` of a padded channels-last array."""
    sb, sh, sw, sc = xp.strides
    b, c = xp.shape[0], xp.shape[3]
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, ho, wo, k, k, c),
        strides=(sb, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    return view.reshape(b * ho * wo, k * k * c)


def _scatter(cols: np.ndarray, out: np.ndarray, k: int, stride: int, ho: int, wo: int) -> None:
    """Add ``cols`` ``(B, Ho, Wo, k, k, C)`` into channels-last ``out`` (col2im)."""
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for ky in range(k):
        for kx in range(k):
            out[:, ky:ky + hspan:stride, kx:kx + wspan:stride, :] += cols[:, :, :, ky, kx, :]


def _kernel_matrix(kernel: np.ndarray) -> np.ndarray:
    """``(C_out, C_in, k, k)`` -> ``(C_out, k*k*C_in)`` matching :func:`_windows` columns."""
    cout = kernel.shape[0]
    return kernel.transpose(0, 2, 3, 1).reshape(cout, -1)


def _check_conv_args(stride: int, padding: int) -> None:
    if int(stride) < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    if int(padding) < 0:
        raise ConfigurationError(f"padding must be >= 0, got {padding}")


def _to_nchw(rows: np.ndarray, b: int, h: int, w: int) -> np.ndarray:
    return rows.reshape(b, h, w, -1).transpose(0, 3, 1, 2)


def _conv_input_grad(g: np.ndarray, kernel: np.ndarray, stride: int, padding: int,
                     in_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of the forward correlation with respect to its input."""
    b, cout, ho, wo = g.shape
    _, cin, k, _ = kernel.shape
    h, w = in_hw
    if stride == 1 and padding <= k - 1:
        # full correlation with the spatially flipped, channel-swapped kernel
        flipped = kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        q = k - 1 - padding
        gp = _nhwc_padded(g, q)
        cols = _windows(gp, k, 1, h, w)
        return _to_nchw(cols @ _kernel_matrix(flipped).T, b, h, w)
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
    dcols = (g2 @ _kernel_matrix(kernel)).reshape(b, ho, wo, k, k, cin)
    hp, wp = h + 2 * padding, w + 2 * padding
    dxp = np.zeros((b, hp, wp, cin))
    _scatter(dcols, dxp, k, stride, ho, wo)
    return dxp[:, padding:padding + h, padding:padding + w, :].transpose(0, 3, 1, 2)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[B, C_in, H, W]`` with ``kernel[C_out, C_in, k, k]``."""
    _check_conv_args(stride, padding)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ConfigurationError("conv2d expects 4-d input and kernel")
    b, cin, h, w = x.shape
    cout, kcin, k, k2 = kernel.shape
    if kcin != cin:
        raise ConfigurationError(f"conv2d: kernel expects {kcin} input channels, input has {cin}")
    if k != k2:
        raise ConfigurationError("conv2d: only square kernels are supported")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ConfigurationError(f"conv2d: kernel {k} larger than padded input {h}x{w}")
    if bias is not None and bias.shape != (cout,):
        raise ConfigurationError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    cols = _windows(_nhwc_padded(x.data, padding), k, stride, ho, wo)
    wmat = _kernel_matrix(kernel.data)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def grad(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = None
        if kernel.requires_grad:
            gw = (g2.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
        gx = _conv_input_grad(g, kernel.data, stride, padding, (h, w)) if x.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(_to_nchw(out, b, ho, wo), parents, grad)


def conv2d_transpose(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution of ``x[B, C_in, H, W]`` with ``kernel[C_in, C_out, k, k]``.

    Each input pixel scatters ``value * kernel`` into a ``k x k`` output
    window placed at ``stride`` spacing; ``padding`` rows/columns are then
    trimmed from every border, giving ``H' = (H - 1) * stride + k - 2 * padding``.
    With ``k == stride`` and ``padding == 0`` the output is exactly
    ``stride`` times larger.  This is the adjoint of :func:`conv2d` with the
    same kernel, stride and padding, i.e. a correlation with the spatially
    flipped kernel over the zero-dilated input.
    """
    _check_conv_args(stride, padding)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ConfigurationError("conv2d_transpose expects 4-d input and kernel")
    b, cin, h, w = x.shape
    kcin, cout, k, k2 = kernel.shape
    if kcin != cin:
        raise ConfigurationError(
            f"conv2d_transpose: kernel expects {kcin} input channels, input has {cin}")
    if k != k2:
        raise ConfigurationError("conv2d_transpose: only square kernels are supported")
    if bias is not None and bias.shape != (cout,):
        raise ConfigurationError(f"conv2d_transpose: bias shape {bias.shape} != ({cout},)")
    hf = (h - 1) * stride + k
    wf = (w - 1) * stride + k
    if hf - 2 * padding < 1 or wf - 2 * padding < 1:
        raise ConfigurationError("conv2d_transpose: padding removes the whole output")
    ho, wo = hf - 2 * padding, wf - 2 * padding

    x2 = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    # (C_in, k*k*C_out): same column order as _windows
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(cin, -1)
    if stride == k and padding == 0:
        # non-overlapping windows: pure reshuffle, no accumulation
        out = (x2 @ wmat).reshape(b, h, w, k, k, cout).transpose(0, 5, 1, 3, 2, 4)
        out = out.reshape(b, cout, hf, wf)
    else:
        full = np.zeros((b, hf, wf, cout))
        _scatter((x2 @ wmat).reshape(b, h, w, k, k, cout), full, k, stride, h, w)
        out = full[:, padding:padding + ho, padding:padding + wo, :].transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def grad(g):
        gcols = _windows(_nhwc_padded(g, padding), k, stride, h, w)
        gx = _to_nchw(gcols @ wmat.T, b, h, w) if x.requires_grad else None
        gw = None
        if kernel.requires_grad:
            gw = (x2.T @ gcols).reshape(cin, k, k, cout).transpose(0, 3, 1, 2)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(out, parents, grad)


# --------------------------------------------------------------------------
# batch normalization
# --------------------------------------------------------------------------


@dataclass
class RunningStats:
    """Per-channel running mean/variance updated by exponential moving average."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    count: int = field(default=0)

    @classmethod
    def create(cls, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> "RunningStats":
        return cls(np.zeros(channels), np.ones(channels), momentum, eps)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running: RunningStats,
               mode: str = "train") -> Tensor:
    """Normalize ``x[B, C, H, W]`` per channel, then scale by gamma and shift by beta.

    In ``"train"`` mode batch statistics (biased variance) are used and
    ``running`` is updated in place; ``"infer"`` uses ``running`` only.
    """
    if x.ndim != 4:
        raise ConfigurationError("batch_norm expects a (B, C, H, W) tensor")
    b, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigurationError(f"batch_norm: gamma/beta must have shape ({c},)")
    eps = running.eps
    gd = gamma.data[None, :, None, None]
    if mode == "train":
        m = b * h * w
        if m < 2:
            raise ConfigurationError("batch_norm: train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running.mean = running.momentum * running.mean + (1.0 - running.momentum) * mu
        running.var = running.momentum * running.var + (1.0 - running.momentum) * var
        running.count += 1
    elif mode == "infer":
        mu, var = running.mean, running.var
    else:
        raise ConfigurationError(f"batch_norm: unknown mode {mode!r}")

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def grad(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * gd
        if mode == "train":
            m = b * h * w
            gx = (inv_std[None, :, None, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            )
        else:
            gx = gxhat * inv_std[None, :, None, None]
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), grad)
