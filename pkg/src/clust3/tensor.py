"""Dense tensors with define-by-run reverse-mode differentiation.

Every operation whose inputs require gradients returns a node that remembers
its parents and a closure mapping the output gradient to input gradients.
:func:`backward` linearizes the graph reachable from a scalar loss into a
:class:`Tape` (topological order) and replays it in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}
DEFAULT_DTYPE = np.float32

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LOG_CLAMP = 1e-12


def _as_dtype(dtype):
    if dtype is None:
        return None
    if isinstance(dtype, str):
        return DTYPES[dtype]
    return np.dtype(dtype).type


class Tensor:
    """An n-d array that can take part in gradient recording.

    Floating data is stored as a contiguous row-major numpy array of
    ``float32`` or ``float64``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        dtype = _as_dtype(dtype)
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        # ascontiguousarray would promote 0-d data to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # arithmetic sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


class Parameter(Tensor):
    """A named trainable leaf, e.g. ``extractor.block2.conv.weight``."""

    __slots__ = ("name",)

    def __init__(self, data, name="", dtype=None, requires_grad=True):
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_finite(arr, op):
    # a sum is cheaper than a full isfinite pass and catches any nan/inf
    if not np.isfinite(np.sum(arr)) and not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite value produced by {op}")


def _node(data, parents, backward, op) -> Tensor:
    data = np.asarray(data)
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _sum_last(a, keepdims=False):
    # numpy reduces a short contiguous last axis slowly; a dot with ones is BLAS
    out = a @ np.ones(a.shape[-1], dtype=a.dtype)
    return out[..., None] if keepdims else out


def _max_last(a, keepdims=False):
    out = a[..., 0].copy()
    for k in range(1, a.shape[-1]):
        np.maximum(out, a[..., k], out=out)
    return out[..., None] if keepdims else out


def _fast_sum(a, axes, keepdims=False):
    last = a.ndim - 1
    if a.ndim == 0 or last not in axes or a.shape[-1] > 64:
        return a.sum(axis=axes, keepdims=keepdims)
    rest = tuple(ax for ax in axes if ax != last)
    if rest:
        a = a.sum(axis=rest, keepdims=True)
    out = _sum_last(a, keepdims=True)
    if not keepdims:
        out = out.reshape([n for i, n in enumerate(out.shape) if i not in axes])
    return out


def _channel_sum(a):
    """Sum of ``B×C×H×W`` over everything but channels."""
    return a.sum(axis=0).reshape(a.shape[1], -1).sum(axis=1)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward, "div")


def exp(x: Tensor):
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor, clamp=LOG_CLAMP):
    """Natural log of ``max(x, clamp)``; zero gradient where clamped."""
    safe = np.maximum(x.data, clamp)

    def backward(g):
        return (np.where(x.data > clamp, g / safe, 0.0).astype(x.dtype, copy=False),)

    return _node(np.log(safe), (x,), backward, "log")


def xlogx(x: Tensor, clamp=LOG_CLAMP):
    """``x * log(max(x, clamp))`` with its exact derivative."""
    safe = np.maximum(x.data, clamp)
    logs = np.log(safe)

    def backward(g):
        return (g * (logs + (x.data > clamp)),)

    return _node(x.data * logs, (x,), backward, "xlogx")


def relu(x: Tensor):
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------------------
# reductions and shape


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    out = _fast_sum(x.data, axes, keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.asarray(out, dtype=x.dtype), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axes, keepdims), 1.0 / count)


def reshape(x: Tensor, shape):
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward, "transpose")


def select(x: Tensor, index, axis):
    """``x`` indexed by a single integer along ``axis`` (that axis is dropped)."""
    axis = axis % x.ndim
    sl = (slice(None),) * axis + (index,)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _node(np.ascontiguousarray(x.data[sl]), (x,), backward, "select")


def stack(xs: Sequence[Tensor], axis=0):
    axis = axis % (xs[0].ndim + 1)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _node(np.stack([t.data for t in xs], axis=axis), tuple(xs), backward, "stack")


def concat(xs: Sequence[Tensor], axis=-1):
    axis = axis % xs[0].ndim
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), backward, "concat")


# ---------------------------------------------------------------------------
# linear algebra and convolution


def matmul(a: Tensor, b: Tensor):
    """2-d matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def head_matmul(a: Tensor, w: Tensor):
    """Per-head products ``out[n, h] = a[n, h] @ w[h]`` for ``N×H×J`` and ``H×J×K``."""
    if a.ndim != 3 or w.ndim != 3 or a.shape[1] != w.shape[0] or a.shape[2] != w.shape[1]:
        raise ShapeError(f"head_matmul: cannot combine {a.shape} with {w.shape}")
    at = a.data.transpose(1, 0, 2)  # H, N, J
    out = np.matmul(at, w.data).transpose(1, 0, 2)

    def backward(g):
        gt = g.transpose(1, 0, 2)  # H, N, K
        ga = np.matmul(gt, w.data.transpose(0, 2, 1)).transpose(1, 0, 2) if a.requires_grad else None
        gw = np.matmul(at.transpose(0, 2, 1), gt) if w.requires_grad else None
        return ga, gw

    return _node(np.ascontiguousarray(out), (a, w), backward, "head_matmul")


def conv2d(x: Tensor, w: Tensor, stride=1, pad=1):
    """Zero-padded 2-d cross-correlation of ``B×C×H×W`` with ``C'×C×kh×kw``."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if pad not in (0, 1) or stride not in (1, 2):
        raise ContractError(f"conv2d: unsupported pad={pad} stride={stride}")
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    span_h, span_w = H + 2 * pad - kh, W + 2 * pad - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError(f"conv2d: non-integral output size for {x.shape}, stride {stride}")
    Ho, Wo = span_h // stride + 1, span_w // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # B, C, Ho, Wo, kh, kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, -1)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
        return gx, gw

    return _node(np.ascontiguousarray(out), (x, w), backward, "conv2d")


def avg_pool2d(x: Tensor, size=2):
    B, C, H, W = x.shape
    if H % size or W % size:
        raise ShapeError(f"avg_pool2d: {H}x{W} not divisible by {size}")
    out = x.data.reshape(B, C, H // size, size, W // size, size).mean(axis=(3, 5))
    scale = 1.0 / (size * size)

    def backward(g):
        gx = np.repeat(np.repeat(g * scale, size, axis=2), size, axis=3)
        return (gx.astype(x.dtype, copy=False),)

    return _node(out, (x,), backward, "avg_pool2d")


# ---------------------------------------------------------------------------
# normalization and probabilities


class BNState:
    """Running per-channel statistics of one batch-norm layer."""

    def __init__(self, channels, dtype=DEFAULT_DTYPE, momentum=BN_MOMENTUM, eps=BN_EPS):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BNState, mode="train"):
    """Per-channel batch normalization of ``B×C×H×W`` input.

    ``train`` normalizes with batch moments and refreshes the running
    statistics; ``batch`` uses batch moments without touching them; ``eval``
    uses the running statistics.
    """
    if mode not in ("train", "batch", "eval"):
        raise ContractError(f"unknown batchnorm mode {mode!r}")
    C = x.shape[1]
    n = x.data.size // C
    bshape = (1, C, 1, 1)
    g_ = gamma.data.reshape(bshape)

    if mode == "eval":
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean.reshape(bshape)) * inv.reshape(bshape)
        out = g_ * xhat + beta.data.reshape(bshape)

        def backward(g):
            gx = g * (g_ * inv.reshape(bshape)) if x.requires_grad else None
            return gx, _channel_sum(g * xhat), _channel_sum(g)

        return _node(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batchnorm")

    if n < 2:
        raise ContractError("batchnorm: need at least two values per channel")
    mu = _channel_sum(x.data) / n
    xc = x.data - mu.reshape(bshape)
    var = _channel_sum(xc * xc) / n
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = xc * inv.reshape(bshape)
    out = g_ * xhat + beta.data.reshape(bshape)
    if mode == "train":
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(state.running_mean.dtype)
        unbiased = var * (n / (n - 1))
        state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(state.running_var.dtype)

    def backward(g):
        ggamma = _channel_sum(g * xhat)
        gbeta = _channel_sum(g)
        gx = None
        if x.requires_grad:
            # d/dx of gamma*xhat+beta, written via the affine-parameter sums
            scale = (gamma.data * inv / n).reshape(bshape)
            gx = scale * (n * g - gbeta.reshape(bshape) - xhat * ggamma.reshape(bshape))
        return gx, ggamma, gbeta

    return _node(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batchnorm")


def softmax_rows(x: Tensor):
    """Softmax over the last axis (rows of an ``N×K`` matrix), max-subtracted."""
    e = np.exp(x.data - _max_last(x.data, keepdims=True))
    s = e / _sum_last(e, keepdims=True)

    def backward(g):
        return (s * (g - _sum_last(g * s, keepdims=True)),)

    return _node(s, (x,), backward, "softmax")


def log_softmax_rows(x: Tensor):
    shifted = x.data - _max_last(x.data, keepdims=True)
    lse = np.log(_sum_last(np.exp(shifted), keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * _sum_last(g, keepdims=True),)

    return _node(out, (x,), backward, "log_softmax")


def take_rows(x: Tensor, index):
    """Select ``x[i, index[i]]`` for every row ``i``."""
    index = np.asarray(index)
    rows = np.arange(x.shape[0])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[rows, index] = g
        return (gx,)

    return _node(x.data[rows, index], (x,), backward, "take_rows")


# ---------------------------------------------------------------------------
# reverse pass


@dataclass
class TapeEntry:
    op: str
    inputs: tuple
    output: int
    node: Tensor


class Tape:
    """Topologically ordered record of the operations leading to a node."""

    def __init__(self, entries):
        self.entries: list[TapeEntry] = entries

    @classmethod
    def from_output(cls, root: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        entries = [
            TapeEntry(n.op, tuple(id(p) for p in n._parents), id(n), n)
            for n in order
            if n._backward is not None
        ]
        return cls(entries)

    def __len__(self):
        return len(self.entries)


def backward(loss: Tensor, tape: Optional[Tape] = None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return tape
    if tape is None:
        tape = Tape.from_output(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        node = entry.node
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
    if loss._backward is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
    return tape
