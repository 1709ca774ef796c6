"""Asymmetric auto-encoder: deep convolutional encoder, shallow non-negative decoder.

The encoder maps an image to a code in (0, 1)^k through

    conv 4x4/2 -> leaky ReLU -> conv 4x4/2 -> batchnorm -> leaky ReLU
    -> flatten -> dense -> batchnorm -> leaky ReLU -> dense k -> sigmoid

(an InfoGAN-discriminator style stack), and the decoder reconstructs
``leaky_relu(b + h @ W)`` with ``W >= 0`` of shape (k, N).  The rows of
``W`` are the atoms of the learned dictionary.  Training minimises the
per-pixel MSE plus ``beta`` times a Bernoulli KL penalty pulling the mean
activation of every code unit toward ``p``; after each Adam update the
decoder weights are clamped onto the non-negative orthant.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_image_matrix, check_shape_match
from .dataset import make_batches
from .morphology import Dictionary
from .nn import (Adam, BatchNorm, CompositionError, Conv2D, Dense, Flatten, LeakyReLU, NeuralNet,
                 Sigmoid, networks_from_bytes, networks_to_bytes)
from .nn.gradcheck import FLOOR, compare, numeric_gradients

logger = logging.getLogger(__name__)

KL_CLAMP = 1e-6


class TrainingDivergedError(FloatingPointError):
    """The training loss became NaN or infinite."""


@dataclass
class AsymAeConfig:
    k: int = 100
    p: float = 0.05
    beta: float = 0.001
    alpha_lrelu: float = 0.1
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    conv_channels: tuple[int, int] = (64, 128)
    hidden: int = 1024
    kernel_size: int = 4
    stride: int = 2
    padding: int | str = 1
    decoder_init_scale: float = 0.05
    early_stop_patience: int | None = 5
    early_stop_min_delta: float = 1e-3
    precision: int = 32

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError(f"p must lie in (0, 1), got {self.p}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if int(self.k) < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")
        self.conv_channels = tuple(int(c) for c in self.conv_channels)

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64


@dataclass
class AsymAeModel:
    encoder: NeuralNet
    decoder: NeuralNet
    image_shape: tuple[int, int]
    config: AsymAeConfig = field(default_factory=AsymAeConfig)

    @property
    def k(self) -> int:
        return self.decoder_weights.shape[0]

    @property
    def decoder_weights(self) -> np.ndarray:
        return self.decoder.layers[0].params["weight"]

    @property
    def decoder_bias(self) -> np.ndarray:
        return self.decoder.layers[0].params["bias"]

    @property
    def dtype(self):
        return self.decoder_weights.dtype

    def project_decoder(self):
        """Clamp decoder weights onto the non-negative orthant, in place."""
        np.maximum(self.decoder_weights, 0.0, out=self.decoder_weights)

    def parameters(self) -> dict[str, np.ndarray]:
        params = {f"encoder/{n}": v for n, v in self.encoder.parameters().items()}
        params.update({f"decoder/{n}": v for n, v in self.decoder.parameters().items()})
        return params

    def gradients(self) -> dict[str, np.ndarray]:
        grads = {f"encoder/{n}": v for n, v in self.encoder.gradients().items()}
        grads.update({f"decoder/{n}": v for n, v in self.decoder.gradients().items()})
        return grads

    def astype(self, dtype) -> "AsymAeModel":
        self.encoder.astype(dtype)
        self.decoder.astype(dtype)
        return self

    def copy(self) -> "AsymAeModel":
        return AsymAeModel(self.encoder.copy(), self.decoder.copy(), self.image_shape,
                           AsymAeConfig(**asdict(self.config)))


def build_model(cfg: AsymAeConfig, image_shape=(28, 28)) -> AsymAeModel:
    h, w = (int(s) for s in image_shape)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    dtype = cfg.dtype
    c1, c2 = cfg.conv_channels
    conv = dict(kernel_size=cfg.kernel_size, stride=cfg.stride, padding=cfg.padding)
    head = [
        Conv2D(1, c1, rng=rng, dtype=dtype, **conv),
        LeakyReLU(cfg.alpha_lrelu),
        Conv2D(c1, c2, rng=rng, dtype=dtype, **conv),
        BatchNorm(c2, dtype=dtype),
        LeakyReLU(cfg.alpha_lrelu),
        Flatten(),
    ]
    try:
        flat = NeuralNet(head).output_shape((1, h, w))[0]
    except CompositionError as exc:
        raise ValueError(f"image shape {h}x{w} is too small for the encoder: {exc}") from None
    encoder = NeuralNet(head + [
        Dense(flat, cfg.hidden, rng=rng, dtype=dtype),
        BatchNorm(cfg.hidden, dtype=dtype),
        LeakyReLU(cfg.alpha_lrelu),
        Dense(cfg.hidden, cfg.k, rng=rng, dtype=dtype),
        Sigmoid(),
    ], input_shape=(1, h, w))
    dense = Dense(cfg.k, h * w, rng=rng, dtype=dtype)
    dense.params["weight"] = (np.abs(rng.uniform(-1.0, 1.0, size=(cfg.k, h * w)))
                              * cfg.decoder_init_scale).astype(dtype)
    decoder = NeuralNet([dense, LeakyReLU(cfg.alpha_lrelu)], input_shape=(cfg.k,))
    model = AsymAeModel(encoder, decoder, (h, w), cfg)
    model.project_decoder()
    return model


# --- loss ---------------------------------------------------------------

def _kl_terms(codes, p):
    t = codes.mean(axis=0)
    tc = np.clip(t, KL_CLAMP, 1.0 - KL_CLAMP)
    return t, tc


def sparsity_penalty(codes, p: float) -> float:
    """``sum_j KL(p || t_j)`` with ``t_j`` the batch-mean activation of unit j.

    ``t_j`` is clamped to ``[1e-6, 1 - 1e-6]``.
    """
    codes = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    _, t = _kl_terms(codes, p)
    return float(np.sum(p * np.log(p / t) + (1.0 - p) * np.log((1.0 - p) / (1.0 - t))))


def sparsity_penalty_grad(codes, p: float) -> np.ndarray:
    """Gradient of :func:`sparsity_penalty` w.r.t. every code entry."""
    t, tc = _kl_terms(codes, p)
    dt = (-p / tc + (1.0 - p) / (1.0 - tc)) * ((t >= KL_CLAMP) & (t <= 1.0 - KL_CLAMP))
    return np.broadcast_to(dt / codes.shape[0], codes.shape).astype(codes.dtype)


def _as_batch(model: AsymAeModel, X):
    X, shape = as_image_matrix(X, n_features=model.image_shape[0] * model.image_shape[1],
                               image_shape=model.image_shape)
    return X.astype(model.dtype, copy=False)


def _forward_loss(model, xflat, beta, p, training, backward=False):
    x = xflat.reshape(-1, 1, *model.image_shape)
    codes = model.encoder.forward(x, training=training)
    out = model.decoder.forward(codes, training=training)
    diff = out - xflat
    mse = float(np.mean(diff.astype(np.float64) ** 2))
    pen = sparsity_penalty(codes, p)
    total = mse + beta * pen
    if backward:
        dout = (2.0 / diff.size) * diff
        dcodes = model.decoder.backward(dout.astype(model.dtype))
        if beta:
            dcodes = dcodes + beta * sparsity_penalty_grad(codes, p)
        model.encoder.backward(dcodes.astype(model.dtype))
    return total, mse, pen


def loss(model: AsymAeModel, X, beta: float | None = None, p: float | None = None,
         training: bool = False):
    """(total, mse, penalty) with ``total = mse + beta * penalty``.

    ``mse`` is the mean over images and pixels; the penalty is taken over
    the batch given.  ``training`` selects batch statistics in batchnorm.
    """
    beta = model.config.beta if beta is None else beta
    p = model.config.p if p is None else p
    return _forward_loss(model, _as_batch(model, X), beta, p, training)


# --- training -----------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    total: float
    mse: float
    penalty: float
    seconds: float = 0.0


def train(model: AsymAeModel, X, cfg: AsymAeConfig | None = None,
          on_step: Callable[[AsymAeModel, int], None] | None = None,
          verbose: bool = False) -> tuple[AsymAeModel, list[EpochRecord]]:
    """Mini-batch Adam on MSE + beta * KL, projecting decoder weights after each step.

    ``on_step(model, step)`` runs after every projected update.  Training
    stops after ``cfg.epochs`` or when the epoch loss has not improved by
    ``early_stop_min_delta`` (relative) for ``early_stop_patience`` epochs.
    """
    cfg = cfg or model.config
    X = _as_batch(model, X)
    opt = Adam(lr=cfg.lr)
    params = model.parameters()
    trace: list[EpochRecord] = []
    best, stale, step = np.inf, 0, 0

    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        plan = make_batches(X.shape[0], cfg.batch_size, cfg.seed + epoch)
        sums = np.zeros(3)
        for idx in plan:
            xb = X[idx]
            total, mse, pen = _forward_loss(model, xb, cfg.beta, cfg.p, True, backward=True)
            if not np.isfinite(total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {step} "
                    f"(mse={mse}, penalty={pen}); try a smaller learning rate than {cfg.lr}")
            opt.step(params, model.gradients())
            model.project_decoder()
            step += 1
            if on_step is not None:
                on_step(model, step)
            sums += len(idx) * np.array([total, mse, pen])
        sums /= X.shape[0]
        rec = EpochRecord(epoch, *map(float, sums), time.perf_counter() - start)
        trace.append(rec)
        msg = (f"epoch {epoch}: loss={rec.total:.6g} mse={rec.mse:.6g} "
               f"penalty={rec.penalty:.6g} ({rec.seconds:.1f}s)")
        if verbose:
            print(msg, flush=True)
        logger.info(msg)
        if rec.total < best * (1.0 - cfg.early_stop_min_delta):
            best, stale = rec.total, 0
        else:
            best = min(best, rec.total)
            stale += 1
            if cfg.early_stop_patience and stale >= cfg.early_stop_patience:
                logger.info("early stop after %d stale epochs", stale)
                break
    model.encoder.clear_cache()
    model.decoder.clear_cache()
    return model, trace


def trace_to_csv(trace: list[EpochRecord]) -> str:
    lines = ["epoch,total,mse,penalty"]
    lines += [f"{r.epoch},{r.total:.6g},{r.mse:.6g},{r.penalty:.6g}" for r in trace]
    return "\n".join(lines) + "\n"


# --- queries ------------------------------------------------------------

def encode(model: AsymAeModel, X, batch_size: int = 500) -> np.ndarray:
    """Codes in (0, 1)^k, computed in inference mode."""
    X = _as_batch(model, X)
    out = [model.encoder.forward(X[s:s + batch_size].reshape(-1, 1, *model.image_shape),
                                 training=False)
           for s in range(0, X.shape[0], batch_size)]
    return np.concatenate(out).astype(np.float64) if out else np.zeros((0, model.k))


def decode(model: AsymAeModel, h, weights=None) -> np.ndarray:
    """``leaky_relu(b + h @ W)``, unclipped.  ``weights`` replaces W (e.g. dilated atoms)."""
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    W = model.decoder_weights if weights is None else np.asarray(weights)
    check_shape_match(h.shape[1], W.shape[0], "code length", "atom count")
    z = model.decoder_bias.astype(np.float64) + h @ W.astype(np.float64)
    alpha = model.decoder.layers[1].alpha
    return np.where(z >= 0, z, alpha * z)


def atoms(model: AsymAeModel) -> Dictionary:
    return Dictionary.from_matrix(model.decoder_weights.astype(np.float64), model.image_shape)


def model_grad_check(model: AsymAeModel, X, eps: float = 1e-6, floor: float | None = None,
                     corrupt: float = 0.0, return_details=False):
    """Finite-difference check of the full training loss (MSE + beta * KL).

    Analytic gradients come from ``model`` at its own precision; the
    oracle runs on a float64 copy.  Batchnorm running statistics are left
    untouched.
    """
    cfg = model.config
    ref = model.copy().astype(np.float64)
    for net in (model.encoder, model.decoder, ref.encoder, ref.decoder):
        for layer in net.layers:
            if isinstance(layer, BatchNorm):
                layer.update_running = False
    try:
        xb = _as_batch(model, X)
        _forward_loss(model, xb, cfg.beta, cfg.p, True, backward=True)
        analytic = {n: g.astype(np.float64) for n, g in model.gradients().items()}
        if corrupt:
            name = next(n for n in analytic if n.endswith("weight"))
            g = analytic[name].reshape(-1)
            g[np.argmax(np.abs(g))] *= 1.0 + corrupt
        x64 = xb.astype(np.float64)
        numeric = numeric_gradients(
            lambda: _forward_loss(ref, x64, cfg.beta, cfg.p, True)[0], ref.parameters(), eps)
    finally:
        for net in (model.encoder, model.decoder):
            for layer in net.layers:
                if isinstance(layer, BatchNorm):
                    layer.update_running = True
        model.encoder.clear_cache()
        model.decoder.clear_cache()
    if floor is None:
        floor = FLOOR[np.dtype(model.dtype)]
    worst, per = compare(analytic, numeric, floor)
    return (worst, per) if return_details else worst


def tiny_config(**overrides) -> AsymAeConfig:
    """Small variant (8x8 inputs, k=4) used for gradient checks."""
    base = dict(k=4, conv_channels=(3, 4), hidden=6, seed=0, precision=64, beta=0.5)
    base.update(overrides)
    return AsymAeConfig(**base)


# --- persistence --------------------------------------------------------

def model_to_bytes(model: AsymAeModel) -> bytes:
    cfg = asdict(model.config)
    cfg["conv_channels"] = list(cfg["conv_channels"])
    meta = {"kind": "asymae", "image_shape": list(model.image_shape), "config": cfg}
    return networks_to_bytes({"encoder": model.encoder, "decoder": model.decoder}, meta)


def model_from_bytes(raw: bytes, dtype=None) -> AsymAeModel:
    nets, meta, _ = networks_from_bytes(raw)
    if meta.get("kind") != "asymae":
        raise ValueError("checkpoint does not hold an asymmetric auto-encoder")
    cfg = AsymAeConfig(**meta["config"])
    model = AsymAeModel(nets["encoder"], nets["decoder"], tuple(meta["image_shape"]), cfg)
    return model.astype(dtype or cfg.dtype)


# --- estimator ----------------------------------------------------------

class AsymAE(TransformerMixin, BaseEstimator):
    """Sparse non-negative asymmetric auto-encoder as a transformer.

    ``transform`` returns the codes, ``inverse_transform`` the decoder
    output, and ``components_`` the (k, N) non-negative atom matrix.
    Extra keyword arguments of :class:`AsymAeConfig` not exposed here
    (channel widths, padding, ...) go through ``architecture``.
    """

    def __init__(self, n_components=100, *, sparsity_target=0.05, beta=0.001,
                 alpha_lrelu=0.1, epochs=50, batch_size=64, learning_rate=1e-3,
                 early_stop_patience=5, precision=32, architecture=None, random_state=0,
                 verbose=False):
        self.n_components = n_components
        self.sparsity_target = sparsity_target
        self.beta = beta
        self.alpha_lrelu = alpha_lrelu
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.early_stop_patience = early_stop_patience
        self.precision = precision
        self.architecture = architecture
        self.random_state = random_state
        self.verbose = verbose

    def _config(self):
        return AsymAeConfig(
            k=self.n_components, p=self.sparsity_target, beta=self.beta,
            alpha_lrelu=self.alpha_lrelu, epochs=self.epochs, batch_size=self.batch_size,
            lr=self.learning_rate, seed=self.random_state,
            early_stop_patience=self.early_stop_patience, precision=self.precision,
            **(self.architecture or {}),
        )

    def fit(self, X, y=None, on_step=None):
        X, image_shape = as_image_matrix(X)
        cfg = self._config()
        self.model_ = build_model(cfg, image_shape)
        _, self.trace_ = train(self.model_, X, cfg, on_step=on_step, verbose=self.verbose)
        self.image_shape_ = image_shape
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return encode(self.model_, X)

    def inverse_transform(self, H):
        check_is_fitted(self, "model_")
        return decode(self.model_, H)

    @property
    def components_(self):
        check_is_fitted(self, "model_")
        return self.model_.decoder_weights.astype(np.float64)

    @classmethod
    def from_model(cls, model: AsymAeModel) -> "AsymAE":
        cfg = model.config
        est = cls(n_components=cfg.k, sparsity_target=cfg.p, beta=cfg.beta,
                  alpha_lrelu=cfg.alpha_lrelu, epochs=cfg.epochs, batch_size=cfg.batch_size,
                  learning_rate=cfg.lr, early_stop_patience=cfg.early_stop_patience,
                  precision=cfg.precision, random_state=cfg.seed)
        est.model_ = model
        est.image_shape_ = model.image_shape
        est.n_features_in_ = model.image_shape[0] * model.image_shape[1]
        est.trace_ = []
        return est
