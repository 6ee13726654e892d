"""Multi-scale CNN: parallel 3/5/7 convolutions, five conv blocks, dense head."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Optional

import numpy as np

from ..classes import N_CLASSES
from ..errors import ConfigError
from .layers import (
    BatchNormLayer,
    ConvLayer,
    DenseLayer,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    dropout_backward,
    dropout_forward,
    maxpool2_backward,
    maxpool2_forward,
    relu_backward,
    relu_forward,
)


@dataclass(frozen=True)
class MscnnConfig:
    in_channels: int = 10
    input_size: int = 32
    branch_kernels: tuple = (3, 5, 7)
    branch_channels: int = 32
    block_channels: tuple = (64, 128, 128, 256, 256)
    block_kernel: int = 3
    hidden: int = 256
    dropout: float = 0.25
    n_classes: int = N_CLASSES

    def __post_init__(self):
        object.__setattr__(self, "branch_kernels", tuple(int(k) for k in self.branch_kernels))
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        if any(k % 2 == 0 for k in self.branch_kernels) or self.block_kernel % 2 == 0:
            raise ConfigError("kernel sizes must be odd")
        if not self.block_channels:
            raise ConfigError("at least one conv block is required")
        if self.input_size % (2 ** len(self.block_channels)):
            raise ConfigError(
                f"input size {self.input_size} not divisible by 2^{len(self.block_channels)}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def n_blocks(self) -> int:
        return len(self.block_channels)

    @property
    def concat_channels(self) -> int:
        return self.branch_channels * len(self.branch_kernels)

    @property
    def final_spatial(self) -> int:
        return self.input_size // 2 ** self.n_blocks

    @property
    def flatten_dim(self) -> int:
        return self.block_channels[-1] * self.final_spatial ** 2

    @property
    def n_layers(self) -> int:
        """Layer boundaries: 0 multi-scale, 1..n_blocks blocks, then two dense layers."""
        return self.n_blocks + 3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["branch_kernels"] = list(self.branch_kernels)
        d["block_channels"] = list(self.block_channels)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "MscnnConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Mscnn:
    """Parameters and hand-differentiated forward/backward of the network.

    Layers ``0..freeze_through`` are frozen: they receive no gradient, and
    their batch-norm layers always run on running statistics.
    """

    kind = "mscnn"

    def __init__(self, config: MscnnConfig = MscnnConfig(), seed: int = 0, dtype=np.float32, freeze_through: int = -1):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        cfg = config
        self.branches = []
        for k in cfg.branch_kernels:
            fan_in = cfg.in_channels * k * k
            self.branches.append(
                ConvLayer(_he(rng, (cfg.branch_channels, cfg.in_channels, k, k), fan_in, self.dtype),
                          np.zeros(cfg.branch_channels, self.dtype))
            )
        self.convs, self.bns = [], []
        c_in = cfg.concat_channels
        kb = cfg.block_kernel
        for c_out in cfg.block_channels:
            # bias-free: the following batch norm's shift subsumes it
            self.convs.append(ConvLayer(_he(rng, (c_out, c_in, kb, kb), c_in * kb * kb, self.dtype)))
            self.bns.append(BatchNormLayer.fresh(c_out, self.dtype))
            c_in = c_out
        self.fc1 = DenseLayer(_he(rng, (cfg.hidden, cfg.flatten_dim), cfg.flatten_dim, self.dtype),
                              np.zeros(cfg.hidden, self.dtype))
        self.fc2 = DenseLayer(_he(rng, (cfg.n_classes, cfg.hidden), cfg.hidden, self.dtype),
                              np.zeros(cfg.n_classes, self.dtype))
        self.freeze_through = -1
        self.set_freeze_through(freeze_through)

    # -- parameter bookkeeping -------------------------------------------------

    def set_freeze_through(self, boundary: int) -> None:
        if not -1 <= boundary < self.config.n_layers:
            raise ValueError(f"freeze boundary must be in [-1, {self.config.n_layers - 1}], got {boundary}")
        self.freeze_through = int(boundary)

    def _param_entries(self):
        """(name, layer index, owner object, attribute) in declaration order."""
        for k, layer in zip(self.config.branch_kernels, self.branches):
            yield f"branch{k}.weight", 0, layer, "weight"
            yield f"branch{k}.bias", 0, layer, "bias"
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns), start=1):
            yield f"block{i}.conv.weight", i, conv, "weight"
            yield f"block{i}.bn.gamma", i, bn, "gamma"
            yield f"block{i}.bn.beta", i, bn, "beta"
        nb = self.config.n_blocks
        yield "fc1.weight", nb + 1, self.fc1, "weight"
        yield "fc1.bias", nb + 1, self.fc1, "bias"
        yield "fc2.weight", nb + 2, self.fc2, "weight"
        yield "fc2.bias", nb + 2, self.fc2, "bias"

    def _buffer_entries(self):
        for i, bn in enumerate(self.bns, start=1):
            yield f"block{i}.bn.running_mean", i, bn, "running_mean"
            yield f"block{i}.bn.running_var", i, bn, "running_var"

    def parameters(self) -> dict:
        """Live references to every parameter array, declaration order."""
        return {name: getattr(obj, attr) for name, _, obj, attr in self._param_entries()}

    def buffers(self) -> dict:
        return {name: getattr(obj, attr) for name, _, obj, attr in self._buffer_entries()}

    def layer_index(self) -> dict:
        return {name: idx for name, idx, _, _ in self._param_entries()}

    def is_frozen(self, layer: int) -> bool:
        return layer <= self.freeze_through

    def frozen_flags(self) -> list[bool]:
        return [self.is_frozen(i) for i in range(self.config.n_layers)]

    def trainable_names(self) -> list[str]:
        return [n for n, idx, _, _ in self._param_entries() if not self.is_frozen(idx)]

    def frozen_names(self) -> list[str]:
        return [n for n, idx, _, _ in self._param_entries() if self.is_frozen(idx)]

    def n_trainable(self) -> int:
        params = self.parameters()
        return int(sum(params[n].size for n in self.trainable_names()))

    def state(self) -> dict:
        """Deep copy of parameters and buffers."""
        return {k: v.copy() for k, v in {**self.parameters(), **self.buffers()}.items()}

    def load_state(self, state: Mapping) -> None:
        for name, _, obj, attr in (*self._param_entries(), *self._buffer_entries()):
            getattr(obj, attr)[...] = state[name]

    def checksum(self, names=None) -> str:
        """SHA-256 over the raw bytes of the named parameters (all by default)."""
        params = {**self.parameters(), **self.buffers()}
        h = hashlib.sha256()
        for name in names if names is not None else params:
            h.update(name.encode())
            h.update(np.ascontiguousarray(params[name]).tobytes())
        return h.hexdigest()

    def copy(self) -> "Mscnn":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Mscnn":
        other = self.copy()
        other.dtype = np.dtype(dtype)
        for _, _, obj, attr in (*other._param_entries(), *other._buffer_entries()):
            setattr(obj, attr, getattr(obj, attr).astype(dtype))
        return other

    # -- forward / backward ----------------------------------------------------

    def forward(self, x: np.ndarray, mode: str = "train", rng: Optional[np.random.Generator] = None):
        """Return ``(logits, cache)``.

        In train mode, unfrozen batch-norm layers use batch statistics (and
        update their running averages) and dropout draws masks from ``rng``.
        """
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2:] != (cfg.input_size, cfg.input_size):
            raise ValueError(
                f"expected input (batch, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size}), got {x.shape}"
            )
        x = np.ascontiguousarray(x, dtype=self.dtype)
        cache = {"x": x}
        h = np.concatenate([conv2d_forward(x, layer) for layer in self.branches], axis=1)
        block_caches = []
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns), start=1):
            z = conv2d_forward(h, conv)
            bn_mode = "eval" if (mode == "eval" or self.is_frozen(i)) else "train"
            zn, bn_cache = batchnorm_forward(z, bn, bn_mode)
            a = relu_forward(zn)
            pooled, arg = maxpool2_forward(a)
            block_caches.append((h, bn_cache, zn, arg))
            h = pooled
        cache["blocks"] = block_caches
        flat = h.reshape(h.shape[0], -1)
        a1 = dense_forward(flat, self.fc1)
        r1 = relu_forward(a1)
        d1, mask = dropout_forward(r1, cfg.dropout, rng, mode)
        logits = dense_forward(d1, self.fc2)
        cache.update(flat=flat, a1=a1, d1=d1, mask=mask, pooled_shape=h.shape)
        return logits, cache

    def backward(self, cache, grad_logits: np.ndarray) -> dict:
        """Gradients of every trainable parameter; propagation stops at the lowest trainable layer."""
        cfg = self.config
        nb = cfg.n_blocks
        lowest = self.freeze_through + 1
        grads = {}
        if lowest > nb + 2:
            return grads
        g_d1, gw, gb = dense_backward(cache["d1"], self.fc2, grad_logits)
        if not self.is_frozen(nb + 2):
            grads["fc2.weight"], grads["fc2.bias"] = gw, gb
        if lowest > nb + 1:
            return grads
        g_a1 = relu_backward(dropout_backward(g_d1, cache["mask"]), cache["a1"])
        g_flat, gw, gb = dense_backward(cache["flat"], self.fc1, g_a1)
        grads["fc1.weight"], grads["fc1.bias"] = gw, gb
        if lowest > nb:
            return grads
        g = g_flat.reshape(cache["pooled_shape"])
        for i in range(nb, 0, -1):
            h_in, bn_cache, zn, arg = cache["blocks"][i - 1]
            conv, bn = self.convs[i - 1], self.bns[i - 1]
            g = maxpool2_backward(g, arg)
            g = relu_backward(g, zn)
            g, ggamma, gbeta = batchnorm_backward(g, bn_cache, bn)
            g, gw, _ = conv2d_backward(h_in, conv, g, need_input_grad=lowest < i)
            grads[f"block{i}.conv.weight"] = gw
            grads[f"block{i}.bn.gamma"] = ggamma
            grads[f"block{i}.bn.beta"] = gbeta
            if lowest == i:
                return _ordered(grads, self.trainable_names())
        offset = 0
        for k, layer in zip(cfg.branch_kernels, self.branches):
            c = layer.out_channels
            g_branch = np.ascontiguousarray(g[:, offset:offset + c])
            offset += c
            _, gw, gb = conv2d_backward(cache["x"], layer, g_branch, need_input_grad=False)
            grads[f"branch{k}.weight"], grads[f"branch{k}.bias"] = gw, gb
        return _ordered(grads, self.trainable_names())

    # -- inference -------------------------------------------------------------

    def predict_logits(self, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
        out = [self.forward(x[s:s + batch_size], mode="eval")[0] for s in range(0, len(x), batch_size)]
        if not out:
            return np.zeros((0, self.config.n_classes), self.dtype)
        return np.concatenate(out)

    def predict_patches(self, patches: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_logits(patches), axis=1).astype(np.int64)


def _ordered(grads: dict, names: list[str]) -> dict:
    return {n: grads[n] for n in names if n in grads}
