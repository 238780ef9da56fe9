"""Differentiable operations.

Every op computes its forward value with numpy and registers a closure
returning the gradient for each parent. Convolutions are valid (unpadded);
callers pad explicitly with :func:`pad_last`.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, make_node


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return a, b


# ---------------------------------------------------------------------------
# Elementwise arithmetic and reductions
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), backward_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), backward_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(a.data * b.data, (a, b), backward_fn, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    return make_node(a.data * s, (a,), lambda g: (g * s,), "scale")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward_fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis, keepdims), 1.0 / count)


def abs(a: Tensor) -> Tensor:  # noqa: A001
    return make_node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def square(a: Tensor) -> Tensor:
    return make_node(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)
    return make_node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def index(a: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing; the gradient scatters back into zeros."""
    def backward_fn(g):
        out = np.zeros_like(a.data)
        out[key] = g
        return (out,)

    return make_node(np.array(a.data[key]), (a,), backward_fn, "index")


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward_fn(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward_fn, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_node(np.stack([t.data for t in tensors], axis=axis), tensors, backward_fn, "stack")


def pad_last(a: Tensor, left: int, right: int) -> Tensor:
    """Zero-pad the last axis."""
    width = [(0, 0)] * (a.ndim - 1) + [(left, right)]
    stop = a.shape[-1] + left

    return make_node(np.pad(a.data, width), (a,), lambda g: (g[..., left:stop],), "pad")


def flip(a: Tensor, axis: int) -> Tensor:
    return make_node(np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis).copy(),), "flip")


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    half = x.dtype.type(0.5)
    return half * (np.tanh(half * x) + 1)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # gradient at exactly 0 is 0
    return make_node(np.where(mask, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return make_node(y, (a,), lambda g: (g * y * (1 - y),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return make_node(y, (a,), lambda g: (g * (1 - y * y),), "tanh")


def glu(a: Tensor, axis: int = 1) -> Tensor:
    """First half of ``axis`` gated by the sigmoid of the second half."""
    size = a.shape[axis]
    if size % 2:
        raise ShapeError(f"glu needs an even extent on axis {axis}, got {size}")
    first, second = np.split(a.data, 2, axis=axis)
    gate = _sigmoid(second)

    def backward_fn(g):
        return (np.concatenate([g * gate, g * first * gate * (1 - gate)], axis=axis),)

    return make_node(first * gate, (a,), backward_fn, "glu")


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0:
        return a
    mask = (rng.random(a.shape) >= p).astype(a.data.dtype) / a.data.dtype.type(1 - p)
    return make_node(a.data * mask, (a,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def l1_loss(est: Tensor, ref) -> Tensor:
    """Mean absolute error over every element."""
    ref = as_tensor(ref)
    if est.shape != ref.shape:
        raise ShapeError(f"l1_loss shape mismatch {est.shape} vs {ref.shape}")
    diff = est.data - ref.data
    n = diff.dtype.type(diff.size)

    def backward_fn(g):
        d = g * np.sign(diff) / n
        return d, -d

    return make_node(np.asarray(np.abs(diff).sum() / n), (est, ref), backward_fn, "l1")


def mse_loss(est: Tensor, ref) -> Tensor:
    ref = as_tensor(ref)
    if est.shape != ref.shape:
        raise ShapeError(f"mse_loss shape mismatch {est.shape} vs {ref.shape}")
    diff = est.data - ref.data
    n = diff.dtype.type(diff.size)

    def backward_fn(g):
        d = 2 * g * diff / n
        return d, -d

    return make_node(np.asarray((diff * diff).sum() / n), (est, ref), backward_fn, "mse")


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross entropy of ``sigmoid(logits)`` against 0/1 targets."""
    x = logits.data
    y = np.asarray(targets, dtype=x.dtype)
    if x.shape != y.shape:
        raise ShapeError(f"bce shape mismatch {x.shape} vs {y.shape}")
    loss = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = x.dtype.type(x.size)
    return make_node(np.asarray(loss.sum() / n), (logits,), lambda g: (g * (_sigmoid(x) - y) / n,), "bce")


# ---------------------------------------------------------------------------
# Convolutions and pooling
# ---------------------------------------------------------------------------


def _im2col1d(x: np.ndarray, k: int, stride: int, t_out: int) -> np.ndarray:
    b, c, _ = x.shape
    if k == 1 and stride == 1:
        return x
    win = sliding_window_view(x, k, axis=2)[:, :, : stride * (t_out - 1) + 1: stride]
    return win.transpose(0, 1, 3, 2).reshape(b, c * k, t_out)


def _col2im1d(cols: np.ndarray, shape, k: int, stride: int) -> np.ndarray:
    b, c, t = shape
    t_out = cols.shape[-1]
    if k == 1 and stride == 1:
        return cols.reshape(shape)
    cols = cols.reshape(b, c, k, t_out)
    out = np.zeros(shape, dtype=cols.dtype)
    span = stride * (t_out - 1) + 1
    for j in range(k):
        out[:, :, j:j + span:stride] += cols[:, :, j]
    return out


def _batched_outer(g: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """sum_b g[b] @ cols[b].T for (B, M, T) and (B, N, T) arrays."""
    return np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid 1-d convolution: ``x`` (B, Cin, T), ``w`` (Cout, Cin, K)."""
    bsz, cin, t = x.shape
    cout, cin_w, k = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv1d: input has {cin} channels, weight expects {cin_w}")
    if t < k:
        raise ShapeError(f"conv1d: input length {t} shorter than kernel {k}")
    t_out = (t - k) // stride + 1
    cols = _im2col1d(x.data, k, stride, t_out)
    wm = w.data.reshape(cout, cin * k)
    y = np.matmul(wm, cols)
    if b is not None:
        y += b.data[None, :, None]

    def backward_fn(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = _col2im1d(np.matmul(wm.T, g), x.shape, k, stride)
        if w.requires_grad:
            gw = _batched_outer(g, cols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_node(y, parents, backward_fn, "conv1d")


def conv_transpose1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Transposed convolution: ``x`` (B, Cin, T), ``w`` (Cin, Cout, K).

    Output length ``(T - 1) * stride + K``; the adjoint of :func:`conv1d`.
    """
    bsz, cin, t = x.shape
    cin_w, cout, k = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv_transpose1d: input has {cin} channels, weight expects {cin_w}")
    if t < 1:
        raise ShapeError("conv_transpose1d: empty input")
    t_out = (t - 1) * stride + k
    wm = w.data.reshape(cin, cout * k)
    y = _col2im1d(np.matmul(wm.T, x.data), (bsz, cout, t_out), k, stride)
    if b is not None:
        y += b.data[None, :, None]

    def backward_fn(g):
        gx = gw = gb = None
        gcols = _im2col1d(g, k, stride, t)
        if x.requires_grad:
            gx = np.matmul(wm, gcols)
        if w.requires_grad:
            gw = _batched_outer(x.data, gcols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_node(y, parents, backward_fn, "conv_transpose1d")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Valid stride-1 2-d convolution: ``x`` (B, Cin, H, W), ``w`` (Cout, Cin, KH, KW)."""
    bsz, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {cin_w}")
    if h < kh or wd < kw:
        raise ShapeError(f"conv2d: input {h}x{wd} smaller than kernel {kh}x{kw}")
    ho, wo = h - kh + 1, wd - kw + 1
    cols = sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, cin * kh * kw)
    wm = w.data.reshape(cout, -1)
    y = (cols @ wm.T).reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2)
    if b is not None:
        y = y + b.data[None, :, None, None]
    y = np.ascontiguousarray(y)

    def backward_fn(g):
        gx = gw = gb = None
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        if x.requires_grad:
            gcols = (g2 @ wm).reshape(bsz, ho, wo, cin, kh, kw)
            gx = np.zeros(x.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + ho, j:j + wo] += gcols[..., i, j].transpose(0, 3, 1, 2)
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_node(y, parents, backward_fn, "conv2d")


def max_pool2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Valid max pooling over the last two axes; ties go to the first maximum."""
    bsz, c, h, wd = x.shape
    if h < k or wd < k:
        raise ShapeError(f"max_pool2d: input {h}x{wd} smaller than window {k}")
    ho, wo = (h - k) // stride + 1, (wd - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(bsz, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += g * (arg == idx)
        return (gx,)

    return make_node(y, (x,), backward_fn, "max_pool2d")


class BatchNormState:
    """Running statistics for one batch-norm layer (updated in training mode)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.mean = np.zeros(channels, dtype=np.float64)
        self.var = np.ones(channels, dtype=np.float64)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Normalise axis 1 over every other axis."""
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    dtype = x.data.dtype
    if training:
        n = x.size // x.shape[1]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.mean = (1 - m) * state.mean + m * mu
        state.var = (1 - m) * state.var + m * var * (n / max(n - 1, 1))
    else:
        mu, var = state.mean.astype(dtype), state.var.astype(dtype)
    inv = (1.0 / np.sqrt(var + state.eps)).astype(dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    y = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward_fn(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            n = x.size // x.shape[1]
            gx = (inv.reshape(bshape) / n) * (
                n * gxhat - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape))
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return make_node(y.astype(dtype), (x, gamma, beta), backward_fn, "batch_norm")
