from .layers import (GRU, BatchNorm1d, Conv1d, Dense, bce_loss, glorot_init, leaky_relu,
                     leaky_relu_backward, maxpool1d, maxpool1d_backward, relu, relu_backward,
                     sigmoid, sigmoid_backward)
from .optim import AdamState, adam_step

__all__ = [
    "GRU", "BatchNorm1d", "Conv1d", "Dense", "bce_loss", "glorot_init", "leaky_relu",
    "leaky_relu_backward", "maxpool1d", "maxpool1d_backward", "relu", "relu_backward",
    "sigmoid", "sigmoid_backward", "AdamState", "adam_step",
]
