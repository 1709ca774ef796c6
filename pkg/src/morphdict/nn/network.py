from __future__ import annotations

import copy

import numpy as np

from .layers import CompositionError, Layer


class NeuralNet:
    """An ordered stack of layers evaluated front to back.

    ``mode`` is "training" or "inference"; it selects batch vs running
    statistics in batchnorm and whether activations are cached for
    :meth:`backward`.
    """

    def __init__(self, layers: list[Layer] | None = None, input_shape: tuple | None = None):
        self.layers = list(layers or [])
        self.mode = "inference"
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        if self.input_shape is not None:
            self.output_shape(self.input_shape)

    def output_shape(self, input_shape):
        shape = tuple(input_shape)
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except CompositionError as exc:
                raise CompositionError(f"layer {i} ({layer.kind}): {exc}") from None
        return shape

    def train(self):
        self.mode = "training"
        return self

    def eval(self):
        self.mode = "inference"
        return self

    @property
    def training(self) -> bool:
        return self.mode == "training"

    def forward(self, x, training: bool | None = None):
        training = self.training if training is None else training
        out = x
        for i, layer in enumerate(self.layers):
            try:
                out = layer.forward(out, training=training)
            except CompositionError as exc:
                raise CompositionError(f"layer {i} ({layer.kind}): {exc}") from None
        return out

    __call__ = forward

    def backward(self, dout):
        """Back-propagate ``dout``; fills each layer's ``grads`` and returns d(input)."""
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for key, value in layer.params.items():
                yield f"{i}.{key}", layer, key, value

    def parameters(self) -> dict[str, np.ndarray]:
        return {name: value for name, _, _, value in self.named_params()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {name: layer.grads[key] for name, layer, key, _ in self.named_params()
                if key in layer.grads}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{i}.{key}": value for i, layer in enumerate(self.layers)
                for key, value in layer.buffers.items()}

    def set_array(self, name: str, value):
        idx, key = name.split(".", 1)
        layer = self.layers[int(idx)]
        store = layer.params if key in layer.params else layer.buffers
        store[key] = value

    def n_params(self) -> int:
        return sum(v.size for v in self.parameters().values())

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def copy(self) -> "NeuralNet":
        return copy.deepcopy(self)

    def clear_cache(self):
        for layer in self.layers:
            layer._cache = None
            layer.grads = {}

    def __repr__(self):
        body = ",\n  ".join(repr(layer) for layer in self.layers)
        return f"NeuralNet([\n  {body}\n], mode={self.mode!r})"
