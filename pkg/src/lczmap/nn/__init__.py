"""From-scratch CNN components: layer kernels, MSCNN, Adam, training, gradient checks."""

from .gradcheck import COMPONENTS, gradient_check
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
    softmax_cross_entropy,
)
from .model import Mscnn, MscnnConfig
from .optim import AdamState, adam_step
from .serialize import load_model, save_model
from .train import EarlyStopping, History, TrainConfig, evaluate, train_mscnn

__all__ = [
    "COMPONENTS", "AdamState", "BatchNormLayer", "ConvLayer", "DenseLayer", "EarlyStopping",
    "History", "Mscnn", "MscnnConfig", "TrainConfig", "adam_step", "batchnorm_backward",
    "batchnorm_forward", "conv2d_backward", "conv2d_forward", "dense_backward", "dense_forward",
    "dropout_backward", "dropout_forward", "evaluate", "gradient_check", "load_model",
    "maxpool2_backward", "maxpool2_forward", "relu_backward", "relu_forward", "save_model",
    "softmax_cross_entropy", "train_mscnn",
]
