"""Layers with hand-written forward and backward passes.

Tensors are plain numpy arrays; image batches are laid out as
(batch, channels, rows, cols).  Every layer keeps its trainable arrays in
``params`` and their gradients (filled by ``backward``) in ``grads``
under the same keys; non-trainable state lives in ``buffers``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class CompositionError(ValueError):
    """An input does not have the shape a layer expects."""


class StateError(RuntimeError):
    """``backward`` was called without a cached training-mode forward."""


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def hyper(self) -> dict:
        """Constructor arguments needed to rebuild the layer."""
        return {}

    def output_shape(self, input_shape: tuple) -> tuple:
        return input_shape

    def forward(self, x, training: bool = False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise StateError(f"{self.kind}: backward called before a training-mode forward")
        return self._cache

    def astype(self, dtype):
        for store in (self.params, self.buffers):
            for key in store:
                store[key] = store[key].astype(dtype)
        self.grads = {}
        self._cache = None
        return self

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.hyper().items())
        return f"{type(self).__name__}({args})"


def _glorot(rng, fan_in, fan_out, shape, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _pad_amount(padding, kernel, stride, size):
    if padding == "valid":
        return 0, 0
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + kernel - size, 0)
        return total // 2, total - total // 2
    p = int(padding)
    return p, p


class Conv2D(Layer):
    """2-D cross-correlation (no kernel flip) with stride and zero padding.

    ``padding`` is "valid", "same" or an explicit symmetric pixel count.
    """

    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding="valid",
                 rng=None, dtype=np.float64):
        super().__init__()
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_size = int(kernel_size)
        self.stride = int(stride)
        self.padding = padding
        rng = rng if rng is not None else np.random.default_rng(0)
        kk = self.kernel_size
        self.params["weight"] = _glorot(
            rng, in_channels * kk * kk, out_channels * kk * kk,
            (out_channels, in_channels, kk, kk), dtype)
        self.params["bias"] = np.zeros(out_channels, dtype=dtype)

    def hyper(self):
        return dict(in_channels=self.in_channels, out_channels=self.out_channels,
                    kernel_size=self.kernel_size, stride=self.stride, padding=self.padding)

    def _geometry(self, h, w):
        kk, s = self.kernel_size, self.stride
        pt, pb = _pad_amount(self.padding, kk, s, h)
        pl, pr = _pad_amount(self.padding, kk, s, w)
        ho = (h + pt + pb - kk) // s + 1
        wo = (w + pl + pr - kk) // s + 1
        return (pt, pb, pl, pr), ho, wo

    def output_shape(self, input_shape):
        c, h, w = input_shape
        if c != self.in_channels:
            raise CompositionError(f"conv2d expects {self.in_channels} channels, got {c}")
        _, ho, wo = self._geometry(h, w)
        if ho < 1 or wo < 1:
            raise CompositionError(f"conv2d: input {h}x{w} too small for kernel {self.kernel_size}")
        return (self.out_channels, ho, wo)

    def forward(self, x, training=False):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise CompositionError(
                f"conv2d expects (N, {self.in_channels}, H, W), got {x.shape}")
        n, c, h, w = x.shape
        (pt, pb, pl, pr), ho, wo = self._geometry(h, w)
        if ho < 1 or wo < 1:
            raise CompositionError(f"conv2d: input {h}x{w} too small for kernel {self.kernel_size}")
        kk, s = self.kernel_size, self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        win = sliding_window_view(xp, (kk, kk), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        # (n, ho, wo, c, kk, kk) -> rows of patches
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kk * kk)
        wmat = self.params["weight"].reshape(self.out_channels, -1)
        out = cols @ wmat.T + self.params["bias"]
        out = out.reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2)
        if training:
            self._cache = (cols, xp.shape, (pt, pb, pl, pr), ho, wo)
        return np.ascontiguousarray(out)

    def backward(self, dout):
        cols, padded_shape, (pt, pb, pl, pr), ho, wo = self._cached()
        n = dout.shape[0]
        kk, s, f = self.kernel_size, self.stride, self.out_channels
        dflat = dout.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        self.grads["weight"] = (dflat.T @ cols).reshape(self.params["weight"].shape)
        self.grads["bias"] = dflat.sum(axis=0)
        dcols = (dflat @ self.params["weight"].reshape(f, -1)).reshape(
            n, ho, wo, self.in_channels, kk, kk)
        dxp = np.zeros(padded_shape, dtype=dout.dtype)
        for i in range(kk):
            for j in range(kk):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[..., i, j].transpose(0, 3, 1, 2)
        hp, wp = padded_shape[2], padded_shape[3]
        return dxp[:, :, pt:hp - pb, pl:wp - pr]


class Dense(Layer):
    """Affine map ``x @ weight + bias`` with weight of shape (in, out)."""

    kind = "dense"

    def __init__(self, in_features, out_features, rng=None, dtype=np.float64):
        super().__init__()
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = _glorot(rng, in_features, out_features,
                                        (in_features, out_features), dtype)
        self.params["bias"] = np.zeros(out_features, dtype=dtype)

    def hyper(self):
        return dict(in_features=self.in_features, out_features=self.out_features)

    def output_shape(self, input_shape):
        if input_shape != (self.in_features,):
            raise CompositionError(f"dense expects ({self.in_features},), got {input_shape}")
        return (self.out_features,)

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise CompositionError(f"dense expects (N, {self.in_features}), got {x.shape}")
        if training:
            self._cache = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, dout):
        x = self._cached()
        self.grads["weight"] = x.T @ dout
        self.grads["bias"] = dout.sum(axis=0)
        return dout @ self.params["weight"].T


class BatchNorm(Layer):
    """Batch normalization over the batch axis (and spatial axes for 4-D input).

    Training mode normalises with batch statistics (biased variance) and
    updates ``running = momentum * running + (1 - momentum) * batch``;
    inference mode uses the running statistics.
    """

    kind = "batchnorm"

    def __init__(self, num_features, momentum=0.9, eps=1e-5, dtype=np.float64):
        super().__init__()
        self.num_features = int(num_features)
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.update_running = True
        self.params["gamma"] = np.ones(num_features, dtype=dtype)
        self.params["beta"] = np.zeros(num_features, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(num_features, dtype=dtype)
        self.buffers["running_var"] = np.ones(num_features, dtype=dtype)

    def hyper(self):
        return dict(num_features=self.num_features, momentum=self.momentum, eps=self.eps)

    def output_shape(self, input_shape):
        if input_shape[0] != self.num_features:
            raise CompositionError(
                f"batchnorm expects {self.num_features} features, got {input_shape[0]}")
        return input_shape

    def _axes(self, x):
        if x.ndim == 2:
            return (0,), (1, -1)
        if x.ndim == 4:
            return (0, 2, 3), (1, -1, 1, 1)
        raise CompositionError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")

    def forward(self, x, training=False):
        if x.shape[1] != self.num_features:
            raise CompositionError(
                f"batchnorm expects {self.num_features} features, got {x.shape}")
        axes, bshape = self._axes(x)
        gamma = self.params["gamma"].reshape(bshape)
        beta = self.params["beta"].reshape(bshape)
        if not training:
            mean = self.buffers["running_mean"].reshape(bshape)
            var = self.buffers["running_var"].reshape(bshape)
            return (x - mean) / np.sqrt(var + self.eps) * gamma + beta
        mean = x.mean(axis=axes, keepdims=True)
        centred = x - mean
        var = (centred * centred).mean(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = centred * inv_std
        if self.update_running:
            mom = self.momentum
            self.buffers["running_mean"] = (
                mom * self.buffers["running_mean"] + (1 - mom) * mean.reshape(-1)
            ).astype(x.dtype)
            self.buffers["running_var"] = (
                mom * self.buffers["running_var"] + (1 - mom) * var.reshape(-1)
            ).astype(x.dtype)
        self._cache = (xhat, inv_std, axes, bshape)
        return xhat * gamma + beta

    def backward(self, dout):
        xhat, inv_std, axes, bshape = self._cached()
        self.grads["gamma"] = (dout * xhat).sum(axis=axes)
        self.grads["beta"] = dout.sum(axis=axes)
        dxhat = dout * self.params["gamma"].reshape(bshape)
        mean_d = dxhat.mean(axis=axes, keepdims=True)
        mean_dx = (dxhat * xhat).mean(axis=axes, keepdims=True)
        return inv_std * (dxhat - mean_d - xhat * mean_dx)


class LeakyReLU(Layer):
    kind = "leaky_relu"

    def __init__(self, alpha=0.1):
        super().__init__()
        self.alpha = float(alpha)

    def hyper(self):
        return dict(alpha=self.alpha)

    def forward(self, x, training=False):
        positive = x >= 0
        if training:
            self._cache = positive
        return np.where(positive, x, self.alpha * x)

    def backward(self, dout):
        positive = self._cached()
        return np.where(positive, dout, self.alpha * dout)


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, training=False):
        # split by sign so exp never overflows
        e = np.exp(-np.abs(x))
        out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
        if training:
            self._cache = out
        return out

    def backward(self, dout):
        out = self._cached()
        return dout * out * (1.0 - out)


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, training=False):
        if training:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._cached())


LAYER_KINDS = {cls.kind: cls for cls in (Conv2D, Dense, BatchNorm, LeakyReLU, Sigmoid, Flatten)}
