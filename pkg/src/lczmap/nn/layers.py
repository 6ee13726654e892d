"""Layer kernels with hand-written backward passes.

All functions work on ``(batch, channels, height, width)`` arrays in
float32, or float64 for gradient checking. Parameters live in small layer
dataclasses; forward functions return outputs and, where the backward pass
needs more than the input, a cache.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .. import _kernels

# im2col buffers are built per chunk of the batch to cap memory
COL_BUDGET_BYTES = 48 << 20


@dataclass
class ConvLayer:
    """Stride-1, same-padded convolution; ``weight`` is (out, in, k, k), k odd."""

    weight: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3] or self.weight.shape[2] % 2 == 0:
            raise ValueError(f"conv weight must be (out, in, k, k) with odd k, got {self.weight.shape}")

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


@dataclass
class BatchNormLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.9

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormLayer":
        return cls(
            np.ones(channels, dtype), np.zeros(channels, dtype),
            np.zeros(channels, dtype), np.ones(channels, dtype),
        )


@dataclass
class DenseLayer:
    """``y = x @ weight.T + bias`` with ``weight`` of shape (out, in)."""

    weight: np.ndarray
    bias: np.ndarray


def _batch_chunks(n: int, per_sample_bytes: int):
    step = max(1, COL_BUDGET_BYTES // max(1, per_sample_bytes))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    n, c, h, w = x.shape
    if c != layer.in_channels:
        raise ValueError(f"conv expects {layer.in_channels} input channels, got {c}")
    k, o = layer.k, layer.out_channels
    xpad = _pad(x, k // 2)
    wmat = layer.weight.reshape(o, -1).T
    out = np.empty((n, o, h, w), dtype=x.dtype)
    for sl in _batch_chunks(n, h * w * c * k * k * x.itemsize):
        cols = _kernels.im2col(xpad[sl], k, h, w)
        res = cols @ wmat
        out[sl] = res.reshape(-1, h, w, o).transpose(0, 3, 1, 2)
    if layer.bias is not None:
        out += layer.bias[None, :, None, None]
    return out


def conv2d_backward(x: np.ndarray, layer: ConvLayer, grad_out: np.ndarray, need_input_grad: bool = True):
    """Return ``(grad_x, grad_weight, grad_bias)``.

    ``grad_x`` is the same-padded correlation of ``grad_out`` with the
    spatially flipped, in/out-transposed kernel; it is ``None`` when not
    requested, and ``grad_bias`` is ``None`` for bias-free layers.
    """
    n, c, h, w = x.shape
    if grad_out.shape != (n, layer.out_channels, h, w):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match conv output")
    k, o = layer.k, layer.out_channels
    xpad = _pad(x, k // 2)
    grad_w = np.zeros((o, c * k * k), dtype=x.dtype)
    for sl in _batch_chunks(n, h * w * c * k * k * x.itemsize):
        cols = _kernels.im2col(xpad[sl], k, h, w)
        g = grad_out[sl].transpose(0, 2, 3, 1).reshape(-1, o)
        grad_w += g.T @ cols
    grad_b = grad_out.sum(axis=(0, 2, 3)) if layer.bias is not None else None
    grad_x = None
    if need_input_grad:
        flipped = np.ascontiguousarray(layer.weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        grad_x = conv2d_forward(grad_out, ConvLayer(flipped))
    return grad_x, grad_w.reshape(layer.weight.shape), grad_b


def maxpool2_forward(x: np.ndarray):
    """2x2 stride-2 max pool; returns ``(out, argmax)``."""
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"max pool needs even spatial dims, got {x.shape[2:]}")
    return _kernels.maxpool2_forward(np.ascontiguousarray(x))


def maxpool2_backward(grad_out: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    return _kernels.maxpool2_backward(np.ascontiguousarray(grad_out), argmax)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def batchnorm_forward(x: np.ndarray, layer: BatchNormLayer, mode: str = "train", update_running: bool = True):
    """Per-channel normalisation; train mode uses (population) batch statistics."""
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    shape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batch norm in train mode needs a batch of at least 2")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update_running:
            m = layer.momentum
            layer.running_mean[...] = m * layer.running_mean + (1 - m) * mean
            layer.running_var[...] = m * layer.running_var + (1 - m) * var
    elif mode == "eval":
        mean, var = layer.running_mean, layer.running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + layer.eps)).astype(x.dtype)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = xhat * layer.gamma.reshape(shape) + layer.beta.reshape(shape)
    return out, (xhat, inv_std, mode)


def batchnorm_backward(grad_out: np.ndarray, cache, layer: BatchNormLayer):
    """Return ``(grad_x, grad_gamma, grad_beta)``."""
    xhat, inv_std, mode = cache
    axes = (0, 2, 3) if grad_out.ndim == 4 else (0,)
    shape = (1, -1, 1, 1) if grad_out.ndim == 4 else (1, -1)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    dxhat = grad_out * layer.gamma.reshape(shape)
    if mode == "eval":
        return dxhat * inv_std.reshape(shape), grad_gamma, grad_beta
    m = grad_out.size // grad_out.shape[1]
    grad_x = (inv_std.reshape(shape) / m) * (
        m * dxhat
        - dxhat.sum(axis=axes).reshape(shape)
        - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
    )
    return grad_x, grad_gamma, grad_beta


def dense_forward(x: np.ndarray, layer: DenseLayer) -> np.ndarray:
    return x @ layer.weight.T + layer.bias


def dense_backward(x: np.ndarray, layer: DenseLayer, grad_out: np.ndarray):
    """Return ``(grad_x, grad_weight, grad_bias)``."""
    return grad_out @ layer.weight, grad_out.T @ x, grad_out.sum(axis=0)


def dropout_forward(x: np.ndarray, p: float, rng: Optional[np.random.Generator], mode: str = "train"):
    """Inverted dropout. Returns ``(out, mask)``; ``mask`` is None when inactive."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return x * mask, mask


def dropout_backward(grad_out: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    return grad_out if mask is None else grad_out * mask


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(logits) and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError("one label per logit row required")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label outside 0-{k - 1}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    grad /= n
    return loss, grad.astype(logits.dtype, copy=False)
