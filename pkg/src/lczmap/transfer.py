"""Frozen-backbone transfer: pretrain, swap the dense head, retrain the unfrozen part."""

from __future__ import annotations


from .nn.model import Mscnn, MscnnConfig
from .nn.train import TrainConfig, train_mscnn


class TransferModel(Mscnn):
    """An MSCNN whose dense head was replaced; layers ``<= freeze_through`` stay fixed."""

    kind = "transfer"


def pretrain_backbone(source_train, source_val, cfg: TrainConfig = TrainConfig(),
                      config: MscnnConfig | None = None, seed: int = 0):
    """Train a from-scratch MSCNN on the source domain; returns ``(model, history)``."""
    config = config or MscnnConfig(in_channels=source_train.n_channels, input_size=source_train.patch_size)
    return train_mscnn(Mscnn(config, seed=seed), source_train, source_val, cfg)


def attach_heads(backbone: Mscnn, freeze_through: int, hidden: int = 128, seed: int = 0) -> TransferModel:
    """Copy the backbone, drop its dense head and append fresh ``hidden -> 17`` layers.

    Layer boundaries: 0 is the multi-scale layer, 1..n_blocks the conv
    blocks, n_blocks+1 and n_blocks+2 the new dense layers; -1 freezes
    nothing.
    """
    head_config = MscnnConfig.from_dict({**backbone.config.to_dict(), "hidden": hidden, "dropout": 0.0})
    if not -1 <= freeze_through < head_config.n_layers:
        raise ValueError(f"freeze boundary must be in [-1, {head_config.n_layers - 1}], got {freeze_through}")
    model = TransferModel(head_config, seed=seed, dtype=backbone.dtype)
    for src, dst in zip(backbone.branches, model.branches):
        dst.weight[...] = src.weight
        dst.bias[...] = src.bias
    for src, dst in zip(backbone.convs, model.convs):
        dst.weight[...] = src.weight
    for src, dst in zip(backbone.bns, model.bns):
        for attr in ("gamma", "beta", "running_mean", "running_var"):
            getattr(dst, attr)[...] = getattr(src, attr)
    model.set_freeze_through(freeze_through)
    return model


def train_transfer(model: TransferModel, target_train, target_val, cfg: TrainConfig = TrainConfig()):
    """Same loop as :func:`train_mscnn`; frozen parameters are left byte-identical."""
    return train_mscnn(model, target_train, target_val, cfg)


def trainable_count_fully_frozen(flatten_dim: int, hidden: int, n_classes: int = 17) -> int:
    return hidden * (flatten_dim + 1) + n_classes * (hidden + 1)


__all__ = ["TransferModel", "attach_heads", "pretrain_backbone", "train_transfer"]
