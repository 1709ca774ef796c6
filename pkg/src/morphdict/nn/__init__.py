"""Minimal hand-differentiated network engine used by the auto-encoder."""

from .checkpoint import networks_from_bytes, networks_to_bytes
from .gradcheck import grad_check, numeric_gradients
from .layers import (BatchNorm, CompositionError, Conv2D, Dense, Flatten, Layer, LeakyReLU,
                     Sigmoid, StateError)
from .network import NeuralNet
from .optim import Adam, adam_step

__all__ = [
    "Adam", "BatchNorm", "CompositionError", "Conv2D", "Dense", "Flatten", "Layer",
    "LeakyReLU", "NeuralNet", "Sigmoid", "StateError", "adam_step", "grad_check",
    "networks_from_bytes", "networks_to_bytes", "numeric_gradients",
]
