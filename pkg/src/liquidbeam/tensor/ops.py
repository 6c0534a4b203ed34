"""Differentiable operations.

Only what the tracker network needs: elementwise arithmetic on equal shapes,
linear layers, 2-D convolution, batch normalization, activations, global
average pooling, concatenation, slicing, row tiling and softmax cross-entropy.
There is no general broadcasting.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DimensionError, Tensor, as_tensor, default_dtype, make_result


class ConfigurationError(ValueError):
    pass


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return make_result(a.data + c, "add_scalar", (a,), lambda g: (g,))
    a = as_tensor(a)
    _check_same(a, b, "add")
    return make_result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same(a, b, "sub")
    return make_result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def rsub(a: Tensor, c: float) -> Tensor:
    """``c - a`` for a python scalar ``c``."""
    return make_result(float(c) - a.data, "rsub", (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same(a, b, "mul")
        ad, bd = a.data, b.data
        return make_result(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))
    c = np.asarray(b, dtype=default_dtype())
    if c.ndim > a.ndim:
        raise DimensionError(f"mul: constant of shape {c.shape} cannot scale {a.shape}")
    np.broadcast_shapes(c.shape, a.shape)

    def bw(g):
        return (g * c,)

    return make_result(a.data * c, "mul_const", (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return make_result(np.asarray(a.data.sum()), "sum", (a,),
                       lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return make_result(np.asarray(a.data.mean()), "mean", (a,),
                       lambda g: (np.full(shape, g / n, dtype=a.data.dtype),))


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return make_result(a.data[index].copy(), "getitem", (a,), bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return make_result(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def concat(xs: list[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise DimensionError("concat: empty input list")
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if x.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(x.shape, ref)) if i != ax):
            raise DimensionError(f"concat: extents {x.shape} incompatible with {ref} on axis {axis}")
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_result(np.concatenate([x.data for x in xs], axis=ax), "concat", tuple(xs), bw)


def repeat_rows(a: Tensor, k: int) -> Tensor:
    """Stack ``k`` copies of ``a`` along axis 0 (copy-major ordering)."""
    n = a.shape[0]

    def bw(g):
        return (g.reshape((k, n) + g.shape[1:]).sum(axis=0),)

    return make_result(np.concatenate([a.data] * k, axis=0), "repeat_rows", (a,), bw)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``y = x @ W.T + b`` with ``x`` of shape (B, I) and ``W`` of shape (O, I)."""
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {W.shape}")
    xd, Wd = x.data, W.data
    y = xd @ Wd.T
    if b is not None:
        y = y + b.data

    def bw(g):
        gx = g @ Wd
        gW = g.T @ xd
        if b is None:
            return gx, gW
        return gx, gW, g.sum(axis=0)

    inputs = (x, W) if b is None else (x, W, b)
    return make_result(y, "linear", inputs, bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.data.dtype), "relu", (x,),
                       lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_result(y, "tanh", (x,), lambda g: (g * (1 - y * y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return make_result(y, "sigmoid", (x,), lambda g: (g * y * (1 - y),))


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def conv_output_size(n: int, kernel: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - kernel) // stride + 1


def conv2d(x: Tensor, k: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding, via im2col."""
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {k.shape}")
    B, C, H, W = x.shape
    Co, Ci, kh, kw = k.shape
    if Ci != C:
        raise DimensionError(f"conv2d: input has {C} channels, kernel expects {Ci} ({x.shape} vs {k.shape})")
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"conv2d: invalid stride={stride} pad={pad}")
    Ho, Wo = conv_output_size(H, kh, stride, pad), conv_output_size(W, kw, stride, pad)
    if Ho <= 0 or Wo <= 0:
        raise ConfigurationError(
            f"conv2d: non-positive output size {Ho}x{Wo} for input {H}x{W}, kernel {kh}x{kw}, "
            f"stride {stride}, pad {pad}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # taps that only ever read zero padding contribute nothing; skip them
    rows = [i for i in range(kh) if any(0 <= o * stride + i - pad < H for o in range(Ho))]
    cols_ = [j for j in range(kw) if any(0 <= o * stride + j - pad < W for o in range(Wo))]
    taps = [(i, j) for i in rows for j in cols_]
    cols = np.empty((B, Ho, Wo, C, len(taps)), dtype=x.data.dtype)
    for t, (i, j) in enumerate(taps):
        cols[..., t] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride].transpose(0, 2, 3, 1)
    cols = cols.reshape(B * Ho * Wo, C * len(taps))
    ti = np.array([i for i, _ in taps])
    tj = np.array([j for _, j in taps])
    kmat = k.data[:, :, ti, tj].reshape(Co, -1)
    out = cols @ kmat.T
    if b is not None:
        out = out + b.data
    out = out.reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Co)
        gk = np.zeros(k.shape, dtype=g.dtype)
        gk[:, :, ti, tj] = (gm.T @ cols).reshape(Co, C, len(taps))
        gcols = (gm @ kmat).reshape(B, Ho, Wo, C, len(taps))
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for t, (i, j) in enumerate(taps):
            gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[..., t].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        if b is None:
            return gx, gk
        return gx, gk, gm.sum(axis=0)

    inputs = (x, k) if b is None else (x, k, b)
    return make_result(np.ascontiguousarray(out), "conv2d", inputs, bw)


@dataclass
class RunningStats:
    """Per-channel running mean/variance for batch normalization."""
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def init(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "RunningStats":
        return cls(np.zeros(channels, np.float32), np.ones(channels, np.float32), momentum, eps)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: RunningStats,
                train: bool = True) -> Tensor:
    """Per-channel normalization over (batch, height, width).

    Train mode uses batch statistics and updates ``state`` in place (unbiased
    variance for the running estimate).  Eval mode uses ``state`` as is; before
    any train step that means mean 0, variance 1.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm2d: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    B, C, H, W = x.shape
    m = B * H * W
    dt = x.data.dtype
    ga = gamma.data.reshape(1, C, 1, 1)
    if train:
        if m < 2:
            raise DimensionError(f"batchnorm2d: train mode needs at least 2 values per channel, got {x.shape}")
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = xc * inv
        mom = state.momentum
        # buffers stay float32 so checkpoints reproduce them exactly
        state.mean = ((1 - mom) * state.mean + mom * mu.reshape(C)).astype(np.float32)
        state.var = ((1 - mom) * state.var + mom * var.reshape(C) * m / (m - 1)).astype(np.float32)

        def bw(g):
            gb = g.sum(axis=(0, 2, 3))
            gg = (g * xhat).sum(axis=(0, 2, 3))
            gxhat = g * ga
            gx = inv / m * (m * gxhat - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                            - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
            return gx, gg, gb
    else:
        mu = state.mean.reshape(1, C, 1, 1).astype(dt)
        inv = (1.0 / np.sqrt(state.var + state.eps)).reshape(1, C, 1, 1).astype(dt)
        xhat = (x.data - mu) * inv

        def bw(g):
            return g * ga * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    y = xhat * ga + beta.data.reshape(1, C, 1, 1)
    return make_result(y.astype(dt, copy=False), "batchnorm2d", (x, gamma, beta), bw)


def avgpool_global(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"avgpool_global: expected 4-D input, got {x.shape}")
    B, C, H, W = x.shape

    def bw(g):
        return (np.broadcast_to((g / (H * W))[:, :, None, None], x.shape).copy(),)

    return make_result(x.data.mean(axis=(2, 3)), "avgpool_global", (x,), bw)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, target, return_probs: bool = False):
    """Batch-mean negative log-likelihood of ``target`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: expected (B, Q) logits, got {logits.shape}")
    B, Q = logits.shape
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    if target.shape != (B,):
        raise DimensionError(f"softmax_cross_entropy: {target.shape[0]} targets for {B} rows")
    if np.any(target < 0) or np.any(target >= Q):
        raise IndexError(f"softmax_cross_entropy: target outside [0, {Q})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(B)
    loss = -logp[rows, target].mean()
    probs = np.exp(logp)

    def bw(g):
        d = probs.copy()
        d[rows, target] -= 1
        return (d * (g / B),)

    out = make_result(np.asarray(loss, dtype=logits.data.dtype), "softmax_cross_entropy", (logits,), bw)
    return (out, probs) if return_probs else out
