"""A small n-d array with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape`. Outside a
tape nothing is recorded, which is the inference path::

    with Tape() as tape:
        loss = mse(model(x), y)
    tape.backward(loss)

Arrays are float32 by default. float64 inputs stay float64, which is what the
gradient checks use. Reductions accumulate in float64.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import rng

DEFAULT_DTYPE = np.float32
CHECK_FINITE = True

_TAPES: list["Tape"] = []


class TapeError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of operations, consumed by exactly one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] = ()) -> None:
        backward(loss, self, wrt)


def backward(loss: Tensor, tape: Tape, wrt: Iterable[Tensor] = ()) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reached from ``loss``.

    Tensors listed in ``wrt`` that the loss does not depend on get a zero
    gradient rather than being left untouched.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("tape reuse: backward() already ran on this tape")
    tape.consumed = True

    produced = {id(n.out) for n in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, tg in zip(node.inputs, in_grads):
            if tg is None or not t.requires_grad:
                continue
            key = id(t)
            if key not in produced:
                leaves[key] = t
            if key in grads:
                grads[key] = grads[key] + tg
            else:
                grads[key] = tg
    if id(loss) not in produced and loss.requires_grad:
        leaves[id(loss)] = loss
    for key, t in leaves.items():
        t.grad = np.asarray(grads[key], dtype=t.dtype).reshape(t.shape)
    for t in wrt:
        if id(t) not in leaves:
            t.grad = np.zeros_like(t.data)
    tape.nodes.clear()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], bwd: Callable, op: str) -> Tensor:
    if CHECK_FINITE and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    if _TAPES and out.requires_grad:
        _TAPES[-1].record(out, inputs, bwd)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _common_dtype(*ts: Tensor):
    return np.result_type(*(t.data.dtype for t in ts))


# ----------------------------------------------------------------------------
# creation

def randn(shape: Sequence[int], seed: int, dtype=DEFAULT_DTYPE) -> Tensor:
    """I.i.d. standard normals, fully determined by ``(shape, seed)``."""
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ValueError(f"randn needs a non-empty shape with positive extents, got {shape}")
    n = int(np.prod(shape))
    return Tensor(rng.normal(seed, n).reshape(shape).astype(dtype))


def zeros(shape: Sequence[int], dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype), requires_grad=requires_grad)


# ----------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return _make(a.data * c, (a,), lambda g: (_unbroadcast(g * c, a.shape),), "mul")
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bwd, "mul")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = 0.5 * (1.0 + np.tanh(0.5 * x))  # logistic without exp overflow
    out = x * s

    def bwd(g):
        return (g * (s * (1.0 + x * (1.0 - s))),)

    return _make(out, (a,), bwd, "silu")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    mask = a.data > floor
    out = np.where(mask, a.data, np.asarray(floor, dtype=a.dtype))
    return _make(out, (a,), lambda g: (g * mask,), "clamp_min")


# ----------------------------------------------------------------------------
# shape

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(tuple(shape))
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bwd(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _make(out, tuple(tensors), bwd, "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make(out, (a,), bwd, "slice")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis (axis -3 of [..., C, H, W])."""
    return concat([a, b], axis=a.ndim - 3)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    return slice_axis(a, a.ndim - 3, start, stop)


def crop2d(a: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left ``h x w`` of the last two axes."""
    if a.shape[-2] == h and a.shape[-1] == w:
        return a
    out = a.data[..., :h, :w]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[..., :h, :w] = g
        return (full,)

    return _make(out, (a,), bwd, "crop2d")


def upsample2x(a: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by 2 along the last two axes."""
    out = a.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def bwd(g):
        s = g.shape
        g = g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2))
        return (g.sum(axis=(-3, -1)),)

    return _make(out, (a,), bwd, "upsample2x")


def depth_to_space(a: Tensor, r: int = 2) -> Tensor:
    """[N, C*r*r, H, W] -> [N, C, H*r, W*r] (sub-pixel shuffle)."""
    n, crr, h, w = a.shape
    c = crr // (r * r)
    if c * r * r != crr:
        raise ValueError(f"channels {crr} not divisible by {r * r}")
    out = a.data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)

    def bwd(g):
        return (g.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(a.shape),)

    return _make(np.ascontiguousarray(out), (a,), bwd, "depth_to_space")


# ----------------------------------------------------------------------------
# reductions and losses

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(np.asarray(out), (a,), bwd, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error, accumulated in float64."""
    target = _as_tensor(target)
    diff = pred.data.astype(np.float64) - target.data.astype(np.float64)
    n = diff.size
    out = np.asarray(np.mean(diff * diff), dtype=pred.dtype)
    dtype = pred.dtype

    def bwd(g):
        d = (2.0 / n) * diff * float(g)
        return d.astype(dtype), (-d).astype(target.dtype)

    return _make(out, (pred, target), bwd, "mse")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (a,), bwd, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bwd(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bwd, "log_softmax")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` [N, K]."""
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    return mul(sum_(mul(log_softmax(logits, -1), Tensor(onehot))), -1.0 / len(labels))


# ----------------------------------------------------------------------------
# linear algebra and convolution

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), bwd, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight [out, in]."""
    w = weight.data
    out = x.data @ w.T
    if bias is not None:
        out = out + bias.data

    def bwd(g):
        gx = g @ w
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, bwd, "linear")


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """[N, C, H, W] -> [N*Ho*Wo, kh*kw*C] patch matrix (channel fastest)."""
    n, c = xp.shape[:2]
    xn = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    win = sliding_window_view(xn, (kh, kw), axis=(1, 2))[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * c)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [N, C_in, H, W] (or [C_in, H, W]) with [C_out, C_in, kH, kW]."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    w = kernel.data
    n, c_in, h, wd = xd.shape
    c_out, kc, kh, kw = w.shape
    if kc != c_in:
        raise ValueError(f"conv2d channel mismatch: input has {c_in}, kernel expects {kc}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output extent non-positive ({ho}x{wo})")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = np.ascontiguousarray(w.transpose(0, 2, 3, 1)).reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    if unbatched:
        out = out[0]
    out = np.ascontiguousarray(out)

    def bwd(g):
        gb = g[None] if unbatched else g
        gmat = gb.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        gw = np.ascontiguousarray((gmat.T @ cols).reshape(c_out, kh, kw, c_in).transpose(0, 3, 1, 2))
        if not x.requires_grad:
            gx = None
        else:
            # input gradient = full correlation of the stride-dilated output
            # grad with the spatially flipped, channel-transposed kernel
            hd, wdd = (ho - 1) * stride + 1, (wo - 1) * stride + 1
            gd = np.zeros((n, c_out, hd + 2 * (kh - 1), wdd + 2 * (kw - 1)), dtype=g.dtype)
            gd[:, :, kh - 1 : kh - 1 + hd : stride, kw - 1 : kw - 1 + wdd : stride] = gb
            wflip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 2, 3, 0)).reshape(c_in, -1)
            hx, wx = hd + kh - 1, wdd + kw - 1
            gx_core = (_im2col(gd, kh, kw, 1, hx, wx) @ wflip.T).reshape(n, hx, wx, c_in).transpose(0, 3, 1, 2)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            gxp[:, :, :hx, :wx] = gx_core
            gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
            if unbatched:
                gx = gx[0]
        if bias is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=0)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, inputs, bwd, "conv2d")


def group_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Single-group normalisation over (C, H, W) per batch item, with per-channel affine."""
    xd = x.data
    axes = tuple(range(xd.ndim - 3, xd.ndim))
    m = xd.mean(axis=axes, keepdims=True, dtype=np.float64)
    var = ((xd - m) ** 2).mean(axis=axes, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = ((xd - m) * inv).astype(xd.dtype)
    cshape = (-1, 1, 1)
    out = xhat
    if gamma is not None:
        out = out * gamma.data.reshape(cshape) + beta.data.reshape(cshape)
    k = int(np.prod([xd.shape[a] for a in axes]))

    def bwd(g):
        red = tuple(a for a in range(xd.ndim) if a not in (xd.ndim - 3,))
        gh = g * gamma.data.reshape(cshape) if gamma is not None else g
        gx = inv / k * (k * gh - gh.sum(axis=axes, keepdims=True) - xhat * (gh * xhat).sum(axis=axes, keepdims=True))
        if gamma is None:
            return (gx,)
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    inputs = (x,) if gamma is None else (x, gamma, beta)
    return _make(out, inputs, bwd, "group_norm")


# ----------------------------------------------------------------------------
# gradient oracle

def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``, coordinate by coordinate."""
    if h <= 0:
        raise ValueError("h must be positive")
    base = np.array(x.data, copy=True)
    grad = np.zeros(base.shape, dtype=np.float64)
    flat = base.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(Tensor(base.copy()))
        flat[i] = old - h
        fm = f(Tensor(base.copy()))
        flat[i] = old
        if fp.data.size != 1 or fm.data.size != 1:
            raise ValueError("finite_diff_grad needs a scalar-valued function")
        grad.reshape(-1)[i] = (float(fp.data) - float(fm.data)) / (2.0 * h)
    return grad


def analytic_grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` through the tape."""
    leaf = Tensor(np.array(x, copy=True), requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
    tape.backward(out, wrt=[leaf])
    return leaf.grad
