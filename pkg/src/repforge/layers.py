"""Forward and backward kernels for the CNN layer kinds.

Images are channels-last. Every spatial op accepts a single image ``(H, W, C)``
or a minibatch ``(N, H, W, C)`` and returns results with the same leading
layout; dense and softmax ops likewise accept ``(n,)`` or ``(N, n)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from repforge.tensor import ShapeError


@dataclass(frozen=True)
class ConvSpec:
    window: tuple[int, int]
    stride: tuple[int, int]
    in_channels: int
    out_maps: int
    padding_mode: str = "same"

    def __post_init__(self):
        object.__setattr__(self, "window", tuple(int(v) for v in self.window))
        object.__setattr__(self, "stride", tuple(int(v) for v in self.stride))
        if len(self.window) != 2 or len(self.stride) != 2:
            raise ValueError("window and stride must be (rows, cols) pairs")
        if min(self.window) < 1 or min(self.stride) < 1:
            raise ValueError(f"window {self.window} and stride {self.stride} must be >= 1")
        if self.in_channels < 1 or self.out_maps < 1:
            raise ValueError("channel counts must be positive")
        if self.padding_mode not in ("same", "valid"):
            raise ValueError(f"padding_mode must be 'same' or 'valid', got {self.padding_mode!r}")

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        return _out_extent(h, self.window[0], self.stride[0], self.padding_mode), _out_extent(
            w, self.window[1], self.stride[1], self.padding_mode
        )

    def padding(self, h: int, w: int) -> tuple[tuple[int, int], tuple[int, int]]:
        """((top, bottom), (left, right)) zero padding; odd totals go bottom/right."""
        if self.padding_mode == "valid":
            return (0, 0), (0, 0)
        ho, wo = self.output_hw(h, w)
        pads = []
        for out, stride, win, size in zip((ho, wo), self.stride, self.window, (h, w)):
            total = max((out - 1) * stride + win - size, 0)
            pads.append((total // 2, total - total // 2))
        return pads[0], pads[1]


def _out_extent(size: int, win: int, stride: int, mode: str) -> int:
    if mode == "same":
        return math.ceil(size / stride)
    if size < win:
        raise ShapeError(f"window {win} larger than input extent {size}")
    return (size - win) // stride + 1


def _batched(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeError(f"expected rank {rank} or {rank + 1} input, got shape {list(x.shape)}")


def _window_slice(start: int, stride: int, count: int) -> slice:
    return slice(start, start + stride * (count - 1) + 1, stride)


# --------------------------------------------------------------------------
# convolution


@dataclass
class ConvCache:
    spec: ConvSpec
    input_shape: tuple[int, ...]
    cols: np.ndarray
    kernels: np.ndarray
    out_hw: tuple[int, int]
    squeeze: bool


def conv2d_forward(x, kernels, bias, spec: ConvSpec):
    """Cross-correlation with zero padding; returns ``(output, cache)``."""
    x, squeeze = _batched(x, 3)
    kernels = np.asarray(kernels, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    n, h, w, c = x.shape
    kh, kw = spec.window
    sy, sx = spec.stride
    if kernels.shape != (kh, kw, spec.in_channels, spec.out_maps):
        raise ShapeError(
            f"kernels {list(kernels.shape)} do not match spec "
            f"{[kh, kw, spec.in_channels, spec.out_maps]}"
        )
    if c != spec.in_channels:
        raise ShapeError(f"input has {c} channels, spec expects {spec.in_channels}")
    if bias.shape != (spec.out_maps,):
        raise ShapeError(f"bias {list(bias.shape)} does not match {spec.out_maps} maps")

    ho, wo = spec.output_hw(h, w)
    (pt, pb), (pl, pr) = spec.padding(h, w)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt + pb + pl + pr else x

    # (n, ho, wo, c, kh, kw) view -> contiguous rows ordered (kh, kw, c) like the kernels
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sy, ::sx][:, :ho, :wo]
    cols = np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * c)
    out = cols @ kernels.reshape(kh * kw * c, spec.out_maps)
    out += bias
    out = out.reshape(n, ho, wo, spec.out_maps)
    cache = ConvCache(spec, x.shape, cols, kernels, (ho, wo), squeeze)
    return (out[0] if squeeze else out), cache


def conv2d_backward(grad_out, cache: ConvCache, need_input_grad: bool = True):
    """Returns ``(grad_input, grad_kernels, grad_bias)``.

    ``grad_input`` is ``None`` when ``need_input_grad`` is false (first layer).
    """
    spec = cache.spec
    n, h, w, c = cache.input_shape
    ho, wo = cache.out_hw
    kh, kw = spec.window
    sy, sx = spec.stride
    grad_out = np.asarray(grad_out, dtype=np.float64)
    expected = (ho, wo, spec.out_maps) if cache.squeeze else (n, ho, wo, spec.out_maps)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out {list(grad_out.shape)} does not match forward output {list(expected)}")

    g = grad_out.reshape(n * ho * wo, spec.out_maps)
    grad_kernels = (cache.cols.T @ g).reshape(cache.kernels.shape)
    grad_bias = g.sum(axis=0)
    if not need_input_grad:
        return None, grad_kernels, grad_bias

    (pt, pb), (pl, pr) = spec.padding(h, w)
    dxp = np.zeros((n, h + pt + pb, w + pl + pr, c))
    for i in range(kh):
        rows = _window_slice(i, sy, ho)
        for j in range(kw):
            dxp[:, rows, _window_slice(j, sx, wo), :] += (g @ cache.kernels[i, j].T).reshape(n, ho, wo, c)
    dx = dxp[:, pt : pt + h, pl : pl + w, :]
    return (dx[0] if cache.squeeze else dx), grad_kernels, grad_bias


# --------------------------------------------------------------------------
# max pooling


@dataclass
class PoolCache:
    input_shape: tuple[int, ...]
    window: tuple[int, int]
    stride: tuple[int, int]
    argmax: np.ndarray  # window-position index (dy * w + dx) per output cell
    squeeze: bool

    def argmax_flat_indices(self) -> np.ndarray:
        """Flat (per-image, row-major H*W*C) input index of each pooled maximum."""
        _, h, w, f = self.input_shape
        _, ho, wo, _ = self.argmax.shape
        dy, dx = np.divmod(self.argmax, self.window[1])
        ys = np.arange(ho)[None, :, None, None] * self.stride[0] + dy
        xs = np.arange(wo)[None, None, :, None] * self.stride[1] + dx
        return (ys * w + xs) * f + np.arange(f)


def maxpool_forward(x, window, stride):
    x, squeeze = _batched(x, 3)
    n, h, w, f = x.shape
    kh, kw = (int(v) for v in window)
    sy, sx = (int(v) for v in stride)
    if kh > h or kw > w:
        raise ShapeError(f"pool window {kh}x{kw} larger than input {h}x{w}")
    ho, wo = (h - kh) // sy + 1, (w - kw) // sx + 1

    best = x[:, _window_slice(0, sy, ho), _window_slice(0, sx, wo), :].copy()
    arg = np.zeros((n, ho, wo, f), dtype=np.int8 if kh * kw < 128 else np.int64)
    for i in range(kh):
        rows = _window_slice(i, sy, ho)
        for j in range(kw):
            if i == j == 0:
                continue
            v = x[:, rows, _window_slice(j, sx, wo), :]
            # strict comparison keeps the earliest (smallest flat index) maximum
            better = v > best
            np.copyto(arg, i * kw + j, where=better)
            np.maximum(best, v, out=best)
    cache = PoolCache(x.shape, (kh, kw), (sy, sx), arg, squeeze)
    return (best[0] if squeeze else best), cache


def maxpool_backward(grad_out, cache: PoolCache):
    n, h, w, f = cache.input_shape
    kh, kw = cache.window
    sy, sx = cache.stride
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if cache.squeeze:
        grad_out = grad_out[None]
    if grad_out.shape != cache.argmax.shape:
        raise ShapeError(
            f"grad_out {list(grad_out.shape)} does not match pooled shape {list(cache.argmax.shape)}"
        )
    _, ho, wo, _ = grad_out.shape
    dx = np.zeros((n, h, w, f))
    for i in range(kh):
        rows = _window_slice(i, sy, ho)
        for j in range(kw):
            hit = cache.argmax == i * kw + j
            dx[:, rows, _window_slice(j, sx, wo), :] += grad_out * hit
    return dx[0] if cache.squeeze else dx


# --------------------------------------------------------------------------
# dense, relu, dropout


@dataclass
class DenseCache:
    x: np.ndarray
    weights: np.ndarray
    squeeze: bool


def dense_forward(x, weights, bias):
    x, squeeze = _batched(x, 1)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weights.ndim != 2 or x.shape[1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise ShapeError(
            f"dense shapes disagree: input {list(x.shape)}, weights {list(weights.shape)}, "
            f"bias {list(bias.shape)}"
        )
    out = x @ weights + bias
    return (out[0] if squeeze else out), DenseCache(x, weights, squeeze)


def dense_backward(grad_out, cache: DenseCache):
    """Returns ``(grad_input, grad_weights, grad_bias)``."""
    g = np.asarray(grad_out, dtype=np.float64)
    if cache.squeeze:
        g = g[None]
    if g.shape != (cache.x.shape[0], cache.weights.shape[1]):
        raise ShapeError(f"grad_out {list(g.shape)} does not match dense output")
    dx = g @ cache.weights.T
    return (dx[0] if cache.squeeze else dx), cache.x.T @ g, g.sum(axis=0)


def relu(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0), x > 0


def relu_backward(grad_out, mask):
    return np.asarray(grad_out, dtype=np.float64) * mask


def dropout_apply(x, keep_prob: float, rng: np.random.Generator | None, training: bool):
    """Inverted dropout. The cache is the multiplicative mask (``None`` = identity)."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
    x = np.asarray(x, dtype=np.float64)
    if not training or keep_prob == 1.0:
        return x, None
    mask = (rng.random(x.shape) < keep_prob) / keep_prob
    return x * mask, mask


def dropout_backward(grad_out, mask):
    grad_out = np.asarray(grad_out, dtype=np.float64)
    return grad_out if mask is None else grad_out * mask


# --------------------------------------------------------------------------
# loss


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, label):
    """Stable softmax + cross-entropy.

    For a single ``(K,)`` logit vector returns ``(loss, probs, grad_logits)``.
    For a batch ``(N, K)`` with ``N`` labels the loss is the batch mean and
    ``grad_logits`` is the gradient of that mean.
    """
    z, squeeze = _batched(logits, 1)
    labels = np.atleast_1d(np.asarray(label))
    n, k = z.shape
    if labels.shape != (n,) or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"need {n} integer labels, got {label!r}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range 0..{k - 1}: {label!r}")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    probs = np.exp(log_probs)
    rows = np.arange(n)
    losses = -log_probs[rows, labels]
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    if squeeze:
        return float(losses[0]), probs[0], grad[0]
    return float(losses.mean()), probs, grad / n
