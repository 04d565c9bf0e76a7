"""Minimal autodiff tensor library: tensors, layers, Adam and checkpoints."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .core import ShapeError, Tensor, concat, no_grad, stack, tensor
from .functional import mse_loss
from .layers import (
    LAYER_KINDS,
    AdaptiveAvgPoolTime,
    BatchNorm2d,
    BiGRU,
    Conv2d,
    Conv3d,
    LayerSpec,
    Linear,
    LSTM,
    MaxPool2d,
    MaxPool3d,
    Module,
    ReLU,
    Sequential,
    Tanh,
    forward,
    mlp,
)
from .optim import Adam
