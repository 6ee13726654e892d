"""Central finite-difference verification of every hand-written backward pass."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

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
    maxpool2_backward,
    maxpool2_forward,
    relu_backward,
    relu_forward,
    softmax_cross_entropy,
)
from .model import Mscnn, MscnnConfig

COMPONENTS = ("conv", "batchnorm", "dense", "maxpool", "relu", "softmax_ce", "mscnn")

TINY_CONFIG = MscnnConfig(
    in_channels=3, input_size=8, branch_channels=4, block_channels=(6, 8), hidden=12, dropout=0.25
)


def relative_error(analytic, numeric) -> np.ndarray:
    a, n = np.abs(analytic), np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), 1e-8)


def numeric_max_error(
    loss: Callable,
    arrays: dict,
    analytic: dict,
    h: float = 1e-5,
    rng=None,
    max_checks: int = 400,
    proj=None,
) -> float:
    """Worst relative error between ``analytic`` and central differences of ``loss``.

    With ``proj`` given, ``loss`` returns an array and the differentiated
    scalar is ``sum(loss() * proj)``; the two perturbed outputs are
    subtracted before contracting, which keeps cancellation error small.
    ``arrays`` are perturbed in place (and restored). Arrays with more than
    ``max_checks`` elements are spot-checked on a seeded random subset.
    """
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ValueError(f"{name} must be contiguous to be perturbed in place")
        idx = np.arange(flat.size)
        if flat.size > max_checks:
            idx = np.sort(rng.choice(flat.size, max_checks, replace=False))
        ga = analytic[name].reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = loss()
            flat[i] = old - h
            fm = loss()
            flat[i] = old
            if proj is None:
                num = (fp - fm) / (2 * h)
            else:
                num = float(np.sum((fp - fm) * proj)) / (2 * h)
            worst = max(worst, float(relative_error(ga[i], num)))
    return worst


def check_conv(rng, h):
    x = rng.standard_normal((2, 3, 8, 8))
    layer = ConvLayer(rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4))
    proj = rng.standard_normal((2, 4, 8, 8))
    gx, gw, gb = conv2d_backward(x, layer, proj)
    return numeric_max_error(lambda: conv2d_forward(x, layer), {"x": x, "w": layer.weight, "b": layer.bias}, {"x": gx, "w": gw, "b": gb}, h, rng, proj=proj)


def check_batchnorm(rng, h):
    x = rng.standard_normal((4, 3, 5, 5)) * 2.0 + 0.5
    layer = BatchNormLayer(rng.standard_normal(3), rng.standard_normal(3), np.zeros(3), np.ones(3))
    proj = rng.standard_normal(x.shape)
    _, cache = batchnorm_forward(x, layer, "train", update_running=False)
    gx, gg, gb = batchnorm_backward(proj, cache, layer)
    worst = numeric_max_error(lambda: batchnorm_forward(x, layer, "train", update_running=False)[0], {"x": x, "g": layer.gamma, "b": layer.beta}, {"x": gx, "g": gg, "b": gb}, h, rng, proj=proj)
    layer.running_mean[:] = rng.standard_normal(3)
    layer.running_var[:] = rng.uniform(0.5, 2.0, 3)
    _, cache = batchnorm_forward(x, layer, "eval")
    gx, gg, gb = batchnorm_backward(proj, cache, layer)
    return max(worst, numeric_max_error(lambda: batchnorm_forward(x, layer, "eval")[0], {"x": x, "g": layer.gamma, "b": layer.beta}, {"x": gx, "g": gg, "b": gb}, h, rng, proj=proj))


def check_dense(rng, h):
    x = rng.standard_normal((5, 7))
    layer = DenseLayer(rng.standard_normal((4, 7)), rng.standard_normal(4))
    proj = rng.standard_normal((5, 4))
    gx, gw, gb = dense_backward(x, layer, proj)
    return numeric_max_error(lambda: dense_forward(x, layer), {"x": x, "w": layer.weight, "b": layer.bias}, {"x": gx, "w": gw, "b": gb}, h, rng, proj=proj)


def check_maxpool(rng, h):
    x = rng.standard_normal((2, 3, 6, 6))
    proj = rng.standard_normal((2, 3, 3, 3))
    _, arg = maxpool2_forward(x)
    gx = maxpool2_backward(proj, arg)
    return numeric_max_error(lambda: maxpool2_forward(x)[0], {"x": x}, {"x": gx}, h, rng, proj=proj)


def check_relu(rng, h):
    x = rng.standard_normal((3, 4, 5, 5))
    # keep clear of the kink, where the derivative is undefined
    x[np.abs(x) < 1e-3] = 0.5
    proj = rng.standard_normal(x.shape)
    gx = relu_backward(proj, x)
    return numeric_max_error(lambda: relu_forward(x), {"x": x}, {"x": gx}, h, rng, proj=proj)


def check_softmax_ce(rng, h):
    logits = rng.standard_normal((4, 17))
    labels = rng.integers(0, 17, 4)
    _, grad = softmax_cross_entropy(logits, labels)
    return numeric_max_error(lambda: softmax_cross_entropy(logits, labels)[0], {"z": logits}, {"z": grad}, h, rng)


def check_mscnn(rng, h, config: MscnnConfig = TINY_CONFIG, batch: int = 4):
    """Whole-network check: train-mode batch norm and a fixed dropout mask."""
    model = Mscnn(config, seed=int(rng.integers(2**31)), dtype=np.float64)
    for bn in model.bns:
        bn.gamma[:] = rng.uniform(0.5, 1.5, bn.gamma.shape)
        bn.beta[:] = rng.standard_normal(bn.beta.shape) * 0.1
    x = rng.standard_normal((batch, config.in_channels, config.input_size, config.input_size))
    y = rng.integers(0, config.n_classes, batch)
    mask_seed = int(rng.integers(2**31))

    def loss():
        logits, _ = model.forward(x, "train", np.random.default_rng(mask_seed))
        return softmax_cross_entropy(logits, y)[0]

    logits, cache = model.forward(x, "train", np.random.default_rng(mask_seed))
    _, g = softmax_cross_entropy(logits, y)
    grads = model.backward(cache, g)
    params = model.parameters()
    return numeric_max_error(loss, params, grads, h, rng, max_checks=150)


_CHECKS = {
    "conv": check_conv,
    "batchnorm": check_batchnorm,
    "dense": check_dense,
    "maxpool": check_maxpool,
    "relu": check_relu,
    "softmax_ce": check_softmax_ce,
    "mscnn": check_mscnn,
}


def gradient_check(component: str = "all", h: float = 1e-5, seed: int = 0) -> dict:
    """Run one or all component checks; returns ``{component: (max_rel_error, seconds)}``."""
    names = COMPONENTS if component == "all" else (component,)
    out = {}
    for name in names:
        if name not in _CHECKS:
            raise ValueError(f"unknown component {name!r}; choose from {', '.join(COMPONENTS)} or all")
        rng = np.random.default_rng([seed, COMPONENTS.index(name)])
        t0 = time.perf_counter()
        err = _CHECKS[name](rng, h)
        out[name] = (err, time.perf_counter() - t0)
    return out
