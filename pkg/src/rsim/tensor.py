"""Dense float64 tensors with reverse-mode differentiation.

Image tensors use channels-last layout: a single image is ``H x W x C`` and a
batch is ``B x H x W x C``. Every op here accepts either form and returns the
same rank it was given.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True).reshape(self.shape)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # arithmetic sugar; only used for losses and tests
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def log(self):
        return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# --------------------------------------------------------------------------
# graph traversal


@dataclass
class Graph:
    """Operation records in topological order (inputs before outputs)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)


def backward(loss: Tensor, graph: Optional[Graph] = None) -> Graph:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor in the graph.

    Leaf gradients accumulate across calls; intermediate gradients are
    released once propagated.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    graph = graph or Graph.trace(loss)
    loss._accumulate(np.ones(loss.shape))
    for node in reversed(graph.nodes):
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad)
        node.grad = None
    return graph


# --------------------------------------------------------------------------
# elementwise / reduction


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", bw)


def tsum(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(np.array(x.data.sum()), (x,), "sum", bw)


def tmean(x: Tensor) -> Tensor:
    n = x.size

    def bw(g):
        x._accumulate(np.broadcast_to(g / n, x.shape))

    return _make(np.array(x.data.mean()), (x,), "mean", bw)


def log(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(g / x.data)

    return _make(np.log(x.data), (x,), "log", bw)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping was active."""
    inside = (x.data >= lo) & (x.data <= hi)

    def bw(g):
        x._accumulate(g * inside)

    return _make(np.clip(x.data, lo, hi), (x,), "clip", bw)


def getitem(x: Tensor, index) -> Tensor:
    def bw(g):
        full = np.zeros(x.shape)
        np.add.at(full, index, g)
        x._accumulate(full)

    return _make(np.array(x.data[index]), (x,), "getitem", bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        x._accumulate(g * mask)

    return _make(x.data * mask, (x,), "relu", bw)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)

    def bw(g):
        x._accumulate(g * out * (1.0 - out))

    return _make(out, (x,), "sigmoid", bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        x._accumulate(out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _make(out, (x,), "softmax", bw)


def softmax2(logits: Tensor) -> Tensor:
    """Two-way softmax over the last axis (``[2]`` or ``[B, 2]``)."""
    if logits.shape[-1] != 2:
        raise ShapeError(f"softmax2 expects a trailing axis of 2, got {logits.shape}")
    return softmax(logits)


# --------------------------------------------------------------------------
# layout


def flatten(x: Tensor, start_dim: int = 0) -> Tensor:
    """Row-major flatten of all axes from ``start_dim`` on."""
    new_shape = x.shape[:start_dim] + (int(np.prod(x.shape[start_dim:])),)

    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return _make(x.data.reshape(new_shape), (x,), "flatten", bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != b.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"cannot stack channels of {a.shape} and {b.shape}")
    ca = a.shape[-1]

    def bw(g):
        if a.requires_grad:
            a._accumulate(g[..., :ca])
        if b.requires_grad:
            b._accumulate(g[..., ca:])

    return _make(np.concatenate([a.data, b.data], axis=-1), (a, b), "concat", bw)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``weight @ x + bias``; ``x`` is ``[N]`` or ``[B, N]``, weight ``[M, N]``."""
    if x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    out = x.data @ weight.data.T + bias.data

    def bw(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            weight._accumulate(g2.T @ x.data.reshape(-1, x.shape[-1]))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _make(out, (x, weight, bias), "dense", bw)


# --------------------------------------------------------------------------
# convolution


def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"expected HxWxC or BxHxWxC, got {x.shape}")


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Strided view ``[B, ho, wo, k, k, C]`` of the k x k patches of ``xp``."""
    b, _, _, c = xp.shape
    sb, sh, sw, sc = xp.strides
    return as_strided(xp, (b, ho, wo, k, k, c), (sb, sh * stride, sw * stride, sh, sw, sc),
                      writeable=False)


def _scatter_patches(patches: np.ndarray, out: np.ndarray, stride: int) -> None:
    """Inverse of ``_windows``: add ``[B, h, w, k, k, C]`` patches into ``out``."""
    _, h, w, k, _, _ = patches.shape
    for i in range(k):
        for j in range(k):
            out[:, i:i + stride * (h - 1) + 1:stride, j:j + stride * (w - 1) + 1:stride, :] += \
                patches[:, :, :, i, j, :]


def conv_output_side(side: int, k: int, stride: int, padding: int) -> int:
    return (side + 2 * padding - k) // stride + 1


def conv_transpose_output_side(side: int, k: int, stride: int, padding: int,
                               output_padding: int = 0) -> int:
    return (side - 1) * stride - 2 * padding + k + output_padding


def _check_geometry(k: int, stride: int, padding: int) -> None:
    if k < 1 or stride < 1 or padding < 0:
        raise ValueError(f"invalid geometry k={k} stride={stride} padding={padding}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with a ``[k, k, Cin, Cout]`` kernel plus per-channel bias."""
    k, k2, cin, cout = kernel.shape
    _check_geometry(k, stride, padding)
    xb, squeeze = _batched(x)
    b, h, w, c = xb.shape
    if k != k2:
        raise ShapeError("only square kernels are supported")
    if c != cin:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h}x{w}")
    ho = conv_output_side(h, k, stride, padding)
    wo = conv_output_side(w, k, stride, padding)
    xp = np.pad(xb, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xb
    cols = _windows(xp, k, stride, ho, wo).reshape(b * ho * wo, k * k * cin)
    wm = kernel.data.reshape(k * k * cin, cout)
    out = (cols @ wm + bias.data).reshape(b, ho, wo, cout)

    def bw(g):
        g2 = g.reshape(b * ho * wo, cout)
        if kernel.requires_grad:
            kernel._accumulate((cols.T @ g2).reshape(kernel.shape))
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dpatch = (g2 @ wm.T).reshape(b, ho, wo, k, k, cin)
            dxp = np.zeros(xp.shape)
            _scatter_patches(dpatch, dxp, stride)
            dx = dxp[:, padding:padding + h, padding:padding + w, :]
            x._accumulate(dx[0] if squeeze else dx)

    return _make(out[0] if squeeze else out, (x, kernel, bias), "conv2d", bw)


def conv2d_transpose(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0,
                     output_padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` in its input, with a ``[k, k, Cout, Cin]`` kernel.

    ``output_padding`` extends the far edge so that any conv input size can be
    recovered when ``stride > 1``.
    """
    k, k2, cout, cin = kernel.shape
    _check_geometry(k, stride, padding)
    if output_padding < 0:
        raise ValueError("output_padding must be >= 0")
    xb, squeeze = _batched(x)
    b, h, w, c = xb.shape
    if k != k2:
        raise ShapeError("only square kernels are supported")
    if c != cin:
        raise ShapeError(f"conv2d_transpose: input has {c} channels, kernel expects {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d_transpose: bias shape {bias.shape} != ({cout},)")
    ho = conv_transpose_output_side(h, k, stride, padding, output_padding)
    wo = conv_transpose_output_side(w, k, stride, padding, output_padding)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d_transpose: empty output")
    full_h = max((h - 1) * stride + k, padding + ho)
    full_w = max((w - 1) * stride + k, padding + wo)
    x2 = xb.reshape(b * h * w, cin)
    wm = kernel.data.reshape(k * k * cout, cin)
    patches = (x2 @ wm.T).reshape(b, h, w, k, k, cout)
    full = np.zeros((b, full_h, full_w, cout))
    _scatter_patches(patches, full, stride)
    out = full[:, padding:padding + ho, padding:padding + wo, :] + bias.data

    def bw(g):
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, cout).sum(axis=0))
        if not (x.requires_grad or kernel.requires_grad):
            return
        gfull = np.zeros((b, full_h, full_w, cout))
        gfull[:, padding:padding + ho, padding:padding + wo, :] = g.reshape(b, ho, wo, cout)
        gcols = _windows(gfull, k, stride, h, w).reshape(b * h * w, k * k * cout)
        if kernel.requires_grad:
            kernel._accumulate((gcols.T @ x2).reshape(kernel.shape))
        if x.requires_grad:
            dx = (gcols @ wm).reshape(b, h, w, cin)
            x._accumulate(dx[0] if squeeze else dx)

    out = np.ascontiguousarray(out)
    return _make(out[0] if squeeze else out, (x, kernel, bias), "conv2d_transpose", bw)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties go to the first cell in row-major scan."""
    xb, squeeze = _batched(x)
    b, h, w, c = xb.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    win = xb.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(
        b, h // 2, w // 2, 4, c)
    arg = win.argmax(axis=3)
    out = np.take_along_axis(win, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def bw(g):
        gw = np.zeros(win.shape)
        np.put_along_axis(gw, arg[:, :, :, None, :], g.reshape(b, h // 2, w // 2, 1, c), axis=3)
        dx = gw.reshape(b, h // 2, w // 2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)
        x._accumulate(dx[0] if squeeze else dx)

    return _make(out[0] if squeeze else out, (x,), "maxpool2", bw)


# --------------------------------------------------------------------------
# batch normalisation


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1) -> "RunningStats":
        return cls(np.zeros(channels), np.ones(channels), momentum)


BN_EPS = 1e-5


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running: RunningStats,
                training: bool, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalisation over every axis but the last.

    In training mode the batch statistics are used and ``running`` is updated
    in place (unbiased variance, exponential moving average).
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    axes = tuple(range(x.ndim - 1))
    n = x.size // c
    if training:
        if n < 2:
            raise ShapeError("batchnorm2d in training mode needs at least 2 values per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = running.momentum
        running.mean = (1 - m) * running.mean + m * mu
        running.var = (1 - m) * running.var + m * var * n / (n - 1)
    else:
        mu, var = running.mean, running.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gx = g * gamma.data
            if training:
                dx = inv / n * (n * gx - gx.sum(axis=axes) - xhat * (gx * xhat).sum(axis=axes))
            else:
                dx = gx * inv
            x._accumulate(dx)

    return _make(out, (x, gamma, beta), "batchnorm2d", bw)
