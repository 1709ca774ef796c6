"""Central finite-difference checks of hand-written gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .network import NeuralNet

DEFAULT_EPS = 1e-6
# entries smaller than FLOOR * (largest gradient entry) are compared on that
# scale instead of their own; exact-zero gradients otherwise turn rounding
# noise into unbounded relative errors
FLOOR = {np.dtype(np.float64): 1e-4, np.dtype(np.float32): 1e-3}
DEFAULT_FLOOR = FLOOR[np.dtype(np.float64)]


def relative_error(analytic, numeric, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_gradients(loss_fn: Callable[[], float], arrays: dict[str, np.ndarray],
                      eps: float = DEFAULT_EPS) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn`` w.r.t. every entry of ``arrays``.

    The arrays are perturbed in place and restored; ``loss_fn`` must read
    them at call time.
    """
    out = {}
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ValueError(f"{name}: array must be contiguous to be perturbed in place")
        num = np.empty(flat.size, dtype=np.float64)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = loss_fn()
            flat[i] = old - eps
            fm = loss_fn()
            flat[i] = old
            num[i] = (fp - fm) / (2.0 * eps)
        out[name] = num.reshape(arr.shape)
    return out


def compare(analytic: dict, numeric: dict, floor: float = DEFAULT_FLOOR):
    """Worst relative error overall and per array.

    ``floor`` is relative to the largest finite-difference entry across
    all arrays.
    """
    scale = max((float(np.abs(n).max(initial=0.0)) for n in numeric.values()), default=0.0)
    absolute = max(floor * scale, np.finfo(np.float64).tiny)
    per = {name: float(relative_error(analytic[name], numeric[name], absolute).max(initial=0.0))
           for name in numeric}
    return max(per.values(), default=0.0), per


def _set_running_updates(net: NeuralNet, enabled: bool):
    for layer in net.layers:
        if hasattr(layer, "update_running"):
            layer.update_running = enabled


def grad_check(net: NeuralNet, x, eps: float = DEFAULT_EPS, loss=None, seed: int = 0,
               floor: float | None = None, corrupt: float = 0.0, return_details=False):
    """Worst relative error between ``net``'s backward pass and finite differences.

    The scalar probed is ``loss(output) -> (value, d value / d output)``,
    by default a fixed random projection of the output.  Derivatives are
    taken w.r.t. every parameter and the input, with the network in
    training mode (running statistics frozen).  The finite-difference
    oracle always runs on a float64 copy, so a float32 network is checked
    against a float64 reference.  ``corrupt`` scales the largest entry of
    the first weight gradient by ``1 + corrupt`` before comparing, to
    demonstrate the checker's sensitivity.
    """
    x = np.asarray(x)
    if loss is None:
        out_shape = net.forward(x.astype(_dtype_of(net)), training=False).shape
        R = np.random.default_rng(seed).standard_normal(out_shape)

        def loss(out):
            return float(np.sum(R * out)), R

    ref = net.copy().astype(np.float64)
    _set_running_updates(net, False)
    _set_running_updates(ref, False)
    try:
        dtype = _dtype_of(net)
        xin = x.astype(dtype)
        out = net.forward(xin, training=True)
        _, dout = loss(out)
        dx = net.backward(np.asarray(dout).astype(dtype))
        analytic = {name: g.astype(np.float64) for name, g in net.gradients().items()}
        analytic["input"] = dx.astype(np.float64)
        if corrupt:
            first = next(n for n in analytic if n.endswith("weight"))
            g = analytic[first].reshape(-1)
            g[np.argmax(np.abs(g))] *= 1.0 + corrupt

        x64 = x.astype(np.float64).copy()
        arrays = ref.parameters()
        arrays["input"] = x64

        def f():
            return loss(ref.forward(x64, training=True))[0]

        numeric = numeric_gradients(f, arrays, eps)
    finally:
        _set_running_updates(net, True)
    if floor is None:
        floor = FLOOR[np.dtype(dtype)]
    worst, per = compare(analytic, numeric, floor)
    if return_details:
        return worst, per
    return worst


def _dtype_of(net: NeuralNet):
    for _, _, _, value in net.named_params():
        return value.dtype
    return np.float64
