"""Adam with step-count learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

DECAY_MODES = ("lr", "weight")


@dataclass
class AdamState:
    """Moment estimates for the trainable parameters only.

    ``decay_mode="lr"`` applies ``lr / (1 + decay * t)``; ``"weight"`` keeps
    the base rate and adds ``decay * theta`` to each gradient (L2 penalty).
    """

    lr: float = 0.002
    decay: float = 0.004
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_mode: str = "lr"
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.decay_mode not in DECAY_MODES:
            raise ValueError(f"decay_mode must be one of {DECAY_MODES}")

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], **hyper) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            **hyper,
        )

    def current_lr(self, t=None) -> float:
        t = self.t if t is None else t
        return self.lr / (1.0 + self.decay * t) if self.decay_mode == "lr" else self.lr


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState):
    """Update ``params`` in place for every name in ``grads``; returns ``params``."""
    for name, g in grads.items():
        if name not in state.m:
            raise KeyError(f"no optimizer state for parameter {name!r}")
        if g.shape != params[name].shape or g.shape != state.m[name].shape:
            raise ValueError(f"shape mismatch for {name}: grad {g.shape}, param {params[name].shape}")
    state.t += 1
    t = state.t
    lr_t = state.current_lr(t)
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if state.decay_mode == "weight":
            g = g + state.decay * p
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr_t * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params
