"""Neural-network operations built on the tensor primitives.

Image tensors use the BCHW layout. Convolution and pooling are single
primitives whose backward passes are themselves primitives (their adjoints),
so differentiating a gradient through them stays inside the graph. Batch norm
and the weighted sum fall back to plain numpy in backward when no graph is
being recorded.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from metadapt.autodiff.tensor import (
    DTYPE,
    ClampMin,
    Concat,
    Function,
    LeakyReLU,
    MatMul,
    Reshape,
    Tensor,
    as_tensor,
    is_grad_enabled,
)
from metadapt.errors import DimensionError, PreconditionError

LEAKY_SLOPE = 0.1


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


@lru_cache(maxsize=64)
def _im2col_index(c: int, h: int, w: int, k: int, s: int, p: int) -> np.ndarray:
    """Flat index into one padded (C, H+2p, W+2p) image for every window cell."""
    ii = np.arange(c * (h + 2 * p) * (w + 2 * p)).reshape(c, h + 2 * p, w + 2 * p)
    win = sliding_window_view(ii, (k, k), axis=(1, 2))[:, ::s, ::s]
    _, ho, wo = win.shape[:3]
    return np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * k * k))


def _im2col(x: np.ndarray, k: int, s: int, p: int) -> np.ndarray:
    """(B, C, H, W) -> (B*Ho*Wo, C*k*k), zero padded."""
    b, c, h, w = x.shape
    if p:
        xp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
        xp[:, :, p : p + h, p : p + w] = x
    else:
        xp = x
    idx = _im2col_index(c, h, w, k, s, p)
    return np.take(xp.reshape(b, -1), idx, axis=1).reshape(b * idx.shape[0], -1)


def _col2im(cols: np.ndarray, shape, k: int, s: int, p: int) -> np.ndarray:
    """Adjoint of _im2col: accumulate window columns back onto the image."""
    b, c, h, w = shape
    ho, wo = _out_size(h, k, s, p), _out_size(w, k, s, p)
    g = cols.reshape(b, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + s * ho : s, j : j + s * wo : s] += g[:, :, i, j]
    if p:
        out = out[:, :, p:-p, p:-p]
    return np.ascontiguousarray(out)


class Conv2d(Function):
    """Cross-correlation of a BCHW input with an OIKK weight.

    The two adjoints below are primitives as well; together the three are
    closed under differentiation.
    """

    stride: int
    pad: int

    def forward(self, x, w):
        o, _, k, _ = w.shape
        b, _, h, wd = x.shape
        ho, wo = _out_size(h, k, self.stride, self.pad), _out_size(wd, k, self.stride, self.pad)
        cols = _im2col(x, k, self.stride, self.pad)
        out = cols @ w.reshape(o, -1).T
        return np.ascontiguousarray(out.reshape(b, ho, wo, o).transpose(0, 3, 1, 2))

    def backward(self, g):
        x, w = self.inputs
        gx = ConvInputAdjoint.apply(g, w, shape=x.shape, stride=self.stride, pad=self.pad) if x.requires_grad else None
        gw = ConvWeightAdjoint.apply(x, g, shape=w.shape, stride=self.stride, pad=self.pad) if w.requires_grad else None
        return gx, gw


class ConvInputAdjoint(Function):
    """Gradient of conv2d w.r.t. its input, as a function of (g, w)."""

    shape: tuple[int, int, int, int]
    stride: int
    pad: int

    def forward(self, g, w):
        o, _, k, _ = w.shape
        if self.stride == 1 and self.pad <= k - 1 and o <= w.shape[1]:
            # transposed convolution == convolution with the flipped kernel
            flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            return Conv2d(stride=1, pad=k - 1 - self.pad).forward(g, flipped)
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        return _col2im(gmat @ w.reshape(o, -1), self.shape, k, self.stride, self.pad)

    def backward(self, gg):
        g, w = self.inputs
        dg = Conv2d.apply(gg, w, stride=self.stride, pad=self.pad) if g.requires_grad else None
        dw = ConvWeightAdjoint.apply(gg, g, shape=w.shape, stride=self.stride, pad=self.pad) if w.requires_grad else None
        return dg, dw


class ConvWeightAdjoint(Function):
    """Gradient of conv2d w.r.t. its weight, as a function of (x, g)."""

    shape: tuple[int, int, int, int]
    stride: int
    pad: int

    def forward(self, x, g):
        o, _, k, _ = self.shape
        cols = _im2col(x, k, self.stride, self.pad)
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        return (gmat.T @ cols).reshape(self.shape)

    def backward(self, gg):
        x, g = self.inputs
        dx = ConvInputAdjoint.apply(g, gg, shape=x.shape, stride=self.stride, pad=self.pad) if x.requires_grad else None
        dg = Conv2d.apply(x, gg, stride=self.stride, pad=self.pad) if g.requires_grad else None
        return dx, dg


class GatherFlat(Function):
    """out = x.ravel()[index]; index has the output shape."""

    index: np.ndarray

    def forward(self, x):
        return x.reshape(-1)[self.index]

    def backward(self, g):
        (x,) = self.inputs
        return (ScatterFlat.apply(g, index=self.index, shape=x.shape),)


class ScatterFlat(Function):
    index: np.ndarray
    shape: tuple[int, ...]

    def forward(self, g):
        size = int(np.prod(self.shape))
        out = np.bincount(self.index.reshape(-1), weights=g.reshape(-1), minlength=size)
        return out.astype(DTYPE).reshape(self.shape)

    def backward(self, gg):
        return (GatherFlat.apply(gg, index=self.index),)


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0, bias: Tensor | None = None) -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d expects a BCHW input and an OIKK weight")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    if weight.shape[2] != weight.shape[3]:
        raise DimensionError("only square kernels are supported")
    if stride < 1 or padding < 0:
        raise PreconditionError("stride must be >= 1 and padding >= 0")
    k = weight.shape[2]
    if _out_size(x.shape[2], k, stride, padding) < 1 or _out_size(x.shape[3], k, stride, padding) < 1:
        raise DimensionError("kernel larger than padded input")
    out = Conv2d.apply(x, weight, stride=stride, pad=padding)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


@lru_cache(maxsize=64)
def _window_flat_index(h: int, w: int, k: int, stride: int, pad: int) -> np.ndarray:
    """(Ho, Wo, k*k) flat index into one padded (H+2p, W+2p) plane per window cell."""
    idx = np.arange((h + 2 * pad) * (w + 2 * pad)).reshape(h + 2 * pad, w + 2 * pad)
    win = sliding_window_view(idx, (k, k))[::stride, ::stride]
    return np.ascontiguousarray(win.reshape(*win.shape[:2], k * k))


@lru_cache(maxsize=64)
def _unpad_index(h: int, w: int, pad: int) -> np.ndarray:
    """Map a flat padded-plane index to the unpadded one (-1 on padding)."""
    out = np.full((h + 2 * pad, w + 2 * pad), -1, dtype=np.int64)
    out[pad : pad + h, pad : pad + w] = np.arange(h * w).reshape(h, w)
    return out.reshape(-1)


class MaxPool(Function):
    k: int
    stride: int
    pad: int

    def forward(self, x):
        b, c, h, w = x.shape
        k, s, p = self.k, self.stride, self.pad
        if p:
            xp = np.full((b, c, h + 2 * p, w + 2 * p), -np.inf, dtype=x.dtype)
            xp[:, :, p : p + h, p : p + w] = x
        else:
            xp = x
        win = _window_flat_index(h, w, k, s, p)
        ho, wo = win.shape[:2]
        vals = np.take(xp.reshape(b * c, -1), win.reshape(-1), axis=1).reshape(b * c, ho * wo, k * k)
        arg = vals.argmax(axis=-1)
        out = np.take_along_axis(vals, arg[..., None], axis=-1)[..., 0]
        local = _unpad_index(h, w, p)[win.reshape(ho * wo, k * k)[np.arange(ho * wo), arg]]
        self.index = (local + (np.arange(b * c) * (h * w))[:, None]).reshape(b, c, ho, wo)
        return out.reshape(b, c, ho, wo)

    def backward(self, g):
        (x,) = self.inputs
        return (ScatterFlat.apply(g, index=self.index, shape=x.shape),)


def pool2d(x: Tensor, mode: str = "avg", kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Average or max pooling.

    Average pooling divides by the number of in-bounds cells, so borders are
    not darkened by the zero padding.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError("pool2d expects a BCHW input")
    b, c, h, w = x.shape
    if mode == "max":
        return MaxPool.apply(x, k=kernel, stride=stride, pad=padding)
    if mode != "avg":
        raise ValueError(f"unknown pooling mode {mode!r}")
    return AvgPool.apply(x, k=kernel, stride=stride, pad=padding)


class AvgPool(Function):
    k: int
    stride: int
    pad: int

    def forward(self, x):
        b, c, h, w = x.shape
        k, s, p = self.k, self.stride, self.pad
        ho, wo = _out_size(h, k, s, p), _out_size(w, k, s, p)
        cols = _im2col(x.reshape(b * c, 1, h, w), k, s, p)
        return cols.sum(axis=1).reshape(b, c, ho, wo) / _valid_counts(h, w, k, s, p)

    def backward(self, g):
        (x,) = self.inputs
        return (AvgPoolAdjoint.apply(g, shape=x.shape, k=self.k, stride=self.stride, pad=self.pad),)


class AvgPoolAdjoint(Function):
    shape: tuple[int, int, int, int]
    k: int
    stride: int
    pad: int

    def forward(self, g):
        b, c, h, w = self.shape
        k, s, p = self.k, self.stride, self.pad
        g = g / _valid_counts(h, w, k, s, p)
        cols = np.repeat(g.reshape(-1, 1), k * k, axis=1)
        return _col2im(cols, (b * c, 1, h, w), k, s, p).reshape(self.shape)

    def backward(self, gg):
        return (AvgPool.apply(gg, k=self.k, stride=self.stride, pad=self.pad),)


@lru_cache(maxsize=64)
def _valid_counts(h, w, k, s, p) -> np.ndarray:
    ones = np.pad(np.ones((h, w), dtype=DTYPE), p)
    win = sliding_window_view(ones, (k, k))[::s, ::s]
    return win.sum(axis=(-1, -2)).astype(DTYPE)


def max_pool_downsample(x: Tensor, factor: int = 2) -> Tensor:
    return MaxPool.apply(x, k=factor, stride=factor, pad=0)


@dataclass
class RunningMoments:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1) -> "RunningMoments":
        return cls(np.zeros(channels, DTYPE), np.ones(channels, DTYPE), momentum)


class BatchNorm(Function):
    """Training-mode batch normalisation over (B, H, W) per channel."""

    eps: float

    def forward(self, x, gamma, beta):
        axes = (0, 2, 3)
        mu = x.mean(axis=axes, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=axes, keepdims=True)
        xhat = (x - mu) / np.sqrt(var + self.eps)
        self.batch_mean, self.batch_var = mu.reshape(-1), var.reshape(-1)
        return xhat * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)

    def backward(self, g):
        if not is_grad_enabled():
            return self._backward_numpy(g.data)
        x, gamma, beta = self.inputs
        axes = (0, 2, 3)
        n = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.mean(axis=axes, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = (var + self.eps) ** -0.5
        xhat = xc * inv
        gb = g.sum(axis=axes)
        gg = (g * xhat).sum(axis=axes)
        gx = None
        if x.requires_grad:
            scale = gamma.reshape(1, -1, 1, 1) * inv * (1.0 / n)
            gx = scale * (
                g * float(n) - gb.reshape(1, -1, 1, 1) - xhat * gg.reshape(1, -1, 1, 1)
            )
        return gx, gg, gb

    def _backward_numpy(self, g):
        x, gamma, _ = (t.data for t in self.inputs)
        axes = (0, 2, 3)
        n = x.shape[0] * x.shape[2] * x.shape[3]
        inv = 1.0 / np.sqrt(self.batch_var + self.eps)
        xhat = (x - self.batch_mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
        gb = g.sum(axis=axes)
        gg = (g * xhat).sum(axis=axes)
        gx = None
        if self.inputs[0].requires_grad:
            scale = (gamma * inv / n).reshape(1, -1, 1, 1)
            gx = Tensor(scale * (g * n - gb.reshape(1, -1, 1, 1) - xhat * gg.reshape(1, -1, 1, 1)))
        return gx, Tensor(gg), Tensor(gb)


class WeightedSum(Function):
    """sum_k w[k] * y_k for a weight vector w and equally shaped y_k."""

    def forward(self, w, *ys):
        out = ys[0] * w[0]
        for k in range(1, len(ys)):
            out = out + ys[k] * w[k]
        return out

    def backward(self, g):
        w, *ys = self.inputs
        if not is_grad_enabled():
            gd = g.data
            gw = Tensor(np.array([np.vdot(gd, y.data) for y in ys])) if w.requires_grad else None
            return [gw] + [Tensor(gd * w.data[k]) if y.requires_grad else None for k, y in enumerate(ys)]
        gw = None
        if w.requires_grad:
            gw = Concat.apply(*[Reshape.apply((g * y).sum(), shape=(1,)) for y in ys], axis=0)
        return [gw] + [g * w[k] if y.requires_grad else None for k, y in enumerate(ys)]


def weighted_sum(w: Tensor, ys) -> Tensor:
    if w.shape != (len(ys),):
        raise DimensionError(f"{len(ys)} terms but weight shape {w.shape}")
    return WeightedSum.apply(w, *ys)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: RunningMoments | None = None,
    mode: str = "train",
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError("batch_norm expects a BCHW input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta must have length {c}")
    if x.shape[0] == 0:
        raise PreconditionError("batch_norm needs a non-empty batch")
    if mode == "eval":
        if state is None:
            raise PreconditionError("eval-mode batch_norm needs running moments")
        inv = 1.0 / np.sqrt(state.var + eps)
        scale = gamma * Tensor(inv)
        shift = beta - Tensor(state.mean) * scale
        return x * scale.reshape(1, c, 1, 1) + shift.reshape(1, c, 1, 1)
    if mode != "train":
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    out = BatchNorm.apply(x, gamma, beta, eps=eps)
    if state is not None and update_stats:
        fn = out._ctx
        mu, var = _batch_moments(x.data) if fn is None else (fn.batch_mean, fn.batch_var)
        n = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * (n / max(n - 1, 1))
        m = state.momentum
        state.mean = ((1 - m) * state.mean + m * mu).astype(DTYPE)
        state.var = ((1 - m) * state.var + m * unbiased).astype(DTYPE)
    return out


def _batch_moments(x: np.ndarray):
    mu = x.mean(axis=(0, 2, 3))
    var = ((x - mu.reshape(1, -1, 1, 1)) ** 2).mean(axis=(0, 2, 3))
    return mu, var


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    return LeakyReLU.apply(x, slope=slope)


def relu(x: Tensor) -> Tensor:
    return LeakyReLU.apply(x, slope=0.0)


def clamp_min(x: Tensor, lo: float) -> Tensor:
    return ClampMin.apply(x, lo=lo)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight + bias with weight stored as (in, out)."""
    out = MatMul.apply(x, weight)
    return out if bias is None else out + bias


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    e = (x - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x - Tensor(x.data.max(axis=axis, keepdims=True))
    return z - z.exp().sum(axis=axis, keepdims=True).log()


def global_avg_pool(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError("global_avg_pool expects (S, D, M, M)")
    return x.mean(axis=(2, 3))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError("cross_entropy expects (B, N) logits and B labels")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise PreconditionError("labels out of range")
    logp = log_softmax(logits, axis=1)
    picked = logp[np.arange(labels.size), labels]
    return -picked.mean()
