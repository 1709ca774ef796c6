"""Sparse non-negative matrix factorization ``X ~ H @ W``.

``X`` is M x N (one flattened image per row), ``H`` is M x k (codes) and
``W`` is k x N (atoms).  A sparseness target on H applies to each column
of H, i.e. to the activations of one atom across the whole data set; a
target on W applies to each atom.
"""

from __future__ import annotations

import io
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.utils.validation import check_is_fitted

from ._validation import as_image_matrix, check_non_negative_matrix, check_shape_match
from .sparsity import check_target, project_columns, project_rows

DICT_MAGIC = b"MDIC"
DICT_VERSION = 1

_TINY = 1e-300


@dataclass
class NmfConfig:
    k: int = 100
    s_H: float | None = None
    s_W: float | None = None
    max_iter: int = 500
    tol: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if int(self.k) < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if int(self.max_iter) < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if not self.tol > 0:
            raise ValueError(f"tol must be > 0, got {self.tol}")
        if self.s_H is not None:
            self.s_H = check_target(self.s_H)
        if self.s_W is not None:
            self.s_W = check_target(self.s_W)


@dataclass
class Factorization:
    H: np.ndarray
    W: np.ndarray
    objective_trace: list[float] = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False
    degenerate: bool = False

    @property
    def objective(self) -> float:
        return self.objective_trace[-1] if self.objective_trace else float("nan")


class _Objective:
    """``||X - HW||^2`` through Gram matrices, without forming HW."""

    def __init__(self, X):
        self.X = X
        self.x_sq = float(np.einsum("ij,ij->", X, X))

    def __call__(self, H, W, XWt=None, HtX=None):
        if XWt is not None:
            cross = float(np.einsum("ij,ij->", H, XWt))
        elif HtX is not None:
            cross = float(np.einsum("ij,ij->", W, HtX))
        else:
            cross = float(np.einsum("ij,ij->", H, self.X @ W.T))
        quad = float(np.einsum("ij,ij->", H.T @ H, W @ W.T))
        return max(self.x_sq - 2.0 * cross + quad, 0.0)


def _lipschitz(G):
    # spectral norm of a small PSD Gram matrix
    return float(np.linalg.eigvalsh(G)[-1]) if G.size else 0.0


def factorize(X, cfg: NmfConfig | None = None, **overrides) -> Factorization:
    """Alternating sparse NMF (Hoyer-style projected gradient).

    A factor with a sparseness target takes a gradient step followed by a
    projection of every constrained vector, halving the step until the
    objective does not increase; an unconstrained factor takes the
    Lee-Seung multiplicative update.  Stops after ``cfg.max_iter``
    iterations or when the relative decrease falls below ``cfg.tol``.
    """
    cfg = NmfConfig(**{**(cfg.__dict__ if cfg else {}), **overrides})
    X = check_non_negative_matrix(X, "factorize")
    M, N = X.shape
    k = cfg.k

    if not np.any(X):
        warnings.warn("all-zero data matrix: returning zero factors", RuntimeWarning)
        return Factorization(np.zeros((M, k)), np.zeros((k, N)), [0.0], 0, True, True)

    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    H = rng.random((M, k))
    W = rng.random((k, N))
    # constrained factors carry unit-norm vectors; the other factor absorbs scale
    if cfg.s_H is not None:
        H = project_columns(H, cfg.s_H, l2=1.0)
    if cfg.s_W is not None:
        W = project_rows(W, cfg.s_W, l2=1.0 if cfg.s_H is None else None)

    objective = _Objective(X)
    HW = H @ W
    scale = float(np.einsum("ij,ij->", X, HW)) / max(float(np.einsum("ij,ij->", HW, HW)), _TINY)
    del HW
    if cfg.s_H is None:
        H *= scale
    else:
        W *= scale
        if cfg.s_W is not None:
            W = project_rows(W, cfg.s_W)

    obj = objective(H, W)
    trace = [obj]
    step_H = step_W = None
    converged = False
    n_iter = 0

    for n_iter in range(1, cfg.max_iter + 1):
        prev = obj

        XWt = X @ W.T
        WWt = W @ W.T
        if cfg.s_H is not None:
            grad = H @ WWt - XWt
            if step_H is None:
                step_H = 1.0 / max(_lipschitz(WWt), _TINY)
            while True:
                H_new = project_columns(H - step_H * grad, cfg.s_H, l2=1.0)
                new = objective(H_new, W, XWt=XWt)
                if new <= obj:
                    break
                step_H /= 2.0
                if step_H < 1e-200:
                    H_new, new = H, obj
                    break
            step_H *= 1.2
            H, obj = H_new, new
        else:
            H_new = H * XWt / np.maximum(H @ WWt, _TINY)
            new = objective(H_new, W, XWt=XWt)
            if new <= obj:
                H, obj = H_new, new

        HtX = H.T @ X
        HtH = H.T @ H
        if cfg.s_W is not None:
            grad = HtH @ W - HtX
            norms = np.sqrt(np.einsum("ij,ij->i", W, W))
            if step_W is None:
                step_W = 1.0 / max(_lipschitz(HtH), _TINY)
            while True:
                W_new = project_rows(W - step_W * grad, cfg.s_W, l2=norms)
                new = objective(H, W_new, HtX=HtX)
                if new <= obj:
                    break
                step_W /= 2.0
                if step_W < 1e-200:
                    W_new, new = W, obj
                    break
            step_W *= 1.2
            W, obj = W_new, new
        else:
            W_new = W * HtX / np.maximum(HtH @ W, _TINY)
            new = objective(H, W_new, HtX=HtX)
            # the multiplicative step is monotone in exact arithmetic; guard rounding
            if new <= obj:
                W, obj = W_new, new

        trace.append(obj)
        if prev == 0.0 or (prev - obj) / prev < cfg.tol:
            converged = True
            break

    if not converged:
        warnings.warn(
            f"sparse NMF stopped at max_iter={cfg.max_iter} before reaching tol={cfg.tol}",
            ConvergenceWarning,
        )
    return Factorization(H, W, trace, n_iter, converged)


def reconstruct(H, W) -> np.ndarray:
    """Linear reconstruction ``H @ W`` (unclipped)."""
    H = np.asarray(H, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    check_shape_match(H.shape[-1], W.shape[0], "code length", "atom count")
    return H @ W


def encode_pseudoinverse(X_new, W) -> np.ndarray:
    """Least-squares codes ``X_new @ pinv(W)``; may contain negative values."""
    X_new = np.atleast_2d(np.asarray(X_new, dtype=np.float64))
    W = np.asarray(W, dtype=np.float64)
    check_shape_match(X_new.shape[1], W.shape[1], "image size", "atom size")
    return X_new @ np.linalg.pinv(W)


def encode_offline(X_new, W, s_H: float | None = None, max_iter: int = 1000,
                   tol: float = 1e-7, return_info: bool = False):
    """Codes for new images against a fixed dictionary.

    Minimises ``||x - h W||^2`` over ``h >= 0`` by projected gradient with
    Nesterov momentum (restarted whenever the objective goes up).  With
    ``s_H`` set, each code vector is additionally projected onto the
    sparseness target after every step, and per-sample steps are halved
    until the objective does not increase.

    Returns the best iterate per sample; with ``return_info=True`` also a
    dict with ``n_iter``, ``converged`` and the per-sample ``objective``.
    """
    X_new = check_non_negative_matrix(np.atleast_2d(X_new), "encode_offline")
    W = check_non_negative_matrix(W, "encode_offline")
    check_shape_match(X_new.shape[1], W.shape[1], "image size", "atom size")
    if s_H is not None:
        s_H = check_target(s_H)
    M, k = X_new.shape[0], W.shape[0]

    G = W @ W.T
    B = X_new @ W.T
    x_sq = np.einsum("ij,ij->i", X_new, X_new)
    L = max(_lipschitz(G), _TINY)

    def obj(Hc, rows=slice(None)):
        return np.maximum(
            x_sq[rows] - 2.0 * np.einsum("ij,ij->i", Hc, B[rows])
            + np.einsum("ij,ij->i", Hc @ G, Hc), 0.0)

    H = np.zeros((M, k))
    f = obj(H)
    converged = np.zeros(M, dtype=bool)
    converged[x_sq == 0.0] = True

    if s_H is None:
        Y = H.copy()
        t = np.ones(M)
        n_iter = 0
        for n_iter in range(1, max_iter + 1):
            act = np.flatnonzero(~converged)
            if act.size == 0:
                break
            Ya = Y[act]
            Hn = np.maximum(Ya - (Ya @ G - B[act]) / L, 0.0)
            fn = obj(Hn, act)
            rel = (f[act] - fn) / np.maximum(f[act], _TINY)
            up = fn > f[act]
            # restart momentum on increase; the plain projected step from H is monotone
            if up.any():
                Hu = H[act[up]]
                Hn[up] = np.maximum(Hu - (Hu @ G - B[act[up]]) / L, 0.0)
                fn[up] = obj(Hn[up], act[up])
                t[act[up]] = 1.0
                rel[up] = (f[act[up]] - fn[up]) / np.maximum(f[act[up]], _TINY)
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t[act] ** 2))
            Y[act] = Hn + ((t[act] - 1.0) / t_new)[:, None] * (Hn - H[act])
            t[act] = t_new
            H[act] = Hn
            f[act] = fn
            converged[act] = (rel >= 0) & (rel < tol) | (fn == 0.0)
    else:
        step = np.full(M, 1.0 / L)
        n_iter = 0
        for n_iter in range(1, max_iter + 1):
            act = np.flatnonzero(~converged)
            if act.size == 0:
                break
            Ha = H[act]
            stepped = np.maximum(Ha - step[act, None] * (Ha @ G - B[act]), 0.0)
            Hn = project_rows(stepped, s_H)
            fn = obj(Hn, act)
            ok = fn <= f[act]
            rel = (f[act] - fn) / np.maximum(f[act], _TINY)
            H[act[ok]] = Hn[ok]
            f[act[ok]] = fn[ok]
            step[act[ok]] *= 1.2
            step[act[~ok]] /= 2.0
            converged[act] = (ok & (rel < tol)) | (step[act] < 1e-12 / L)

    all_done = bool(converged.all())
    if not all_done:
        warnings.warn(
            f"encode_offline: {int((~converged).sum())} of {M} samples did not converge "
            f"in {max_iter} iterations; returning best iterates",
            ConvergenceWarning,
        )
    if return_info:
        return H, {"n_iter": n_iter, "converged": all_done, "objective": f}
    return H


# --- persistence --------------------------------------------------------

def factorization_to_bytes(H, W) -> bytes:
    """Flat container: ``MDIC`` + version, M, N, k (LE uint32) + H + W (LE float64)."""
    H = np.asarray(H, dtype="<f8")
    W = np.asarray(W, dtype="<f8")
    M, k = H.shape
    k2, N = W.shape
    check_shape_match(k, k2, "code length", "atom count")
    buf = io.BytesIO()
    buf.write(DICT_MAGIC)
    buf.write(struct.pack("<4I", DICT_VERSION, M, N, k))
    buf.write(np.ascontiguousarray(H).tobytes())
    buf.write(np.ascontiguousarray(W).tobytes())
    return buf.getvalue()


def factorization_from_bytes(raw: bytes) -> tuple[np.ndarray, np.ndarray]:
    if raw[:4] != DICT_MAGIC:
        raise ValueError(f"not a dictionary container (magic {raw[:4]!r})")
    version, M, N, k = struct.unpack("<4I", raw[4:20])
    if version != DICT_VERSION:
        raise ValueError(f"unsupported dictionary container version {version}")
    expected = 20 + 8 * k * (M + N)
    if len(raw) != expected:
        raise ValueError(f"dictionary container has {len(raw)} bytes, expected {expected}")
    H = np.frombuffer(raw, dtype="<f8", count=M * k, offset=20).reshape(M, k)
    W = np.frombuffer(raw, dtype="<f8", count=k * N, offset=20 + 8 * M * k).reshape(k, N)
    return H.astype(np.float64), W.astype(np.float64)


# --- estimator ----------------------------------------------------------

class SparseNMF(TransformerMixin, BaseEstimator):
    """Sparse NMF as a transformer.

    ``fit`` learns the atoms (``components_``, shape (k, N)) together with
    the training codes (``codes_``); ``transform`` encodes new images
    against the frozen atoms by constrained least squares.

    Parameters
    ----------
    n_components : int
        Number of atoms k.
    sparsity_codes : float or None
        Sparseness target for each column of the code matrix.
    sparsity_atoms : float or None
        Sparseness target for each atom.
    max_iter, tol : stopping rule of the alternating solver.
    transform_sparsity : {"none", "codes"}
        Whether ``transform`` projects each new code onto
        ``sparsity_codes`` as well.
    random_state : int
        Seed of the uniform initialisation.
    """

    def __init__(self, n_components=100, *, sparsity_codes=None, sparsity_atoms=None,
                 max_iter=500, tol=1e-5, transform_sparsity="none", random_state=0):
        self.n_components = n_components
        self.sparsity_codes = sparsity_codes
        self.sparsity_atoms = sparsity_atoms
        self.max_iter = max_iter
        self.tol = tol
        self.transform_sparsity = transform_sparsity
        self.random_state = random_state

    def _config(self):
        return NmfConfig(
            k=self.n_components, s_H=self.sparsity_codes, s_W=self.sparsity_atoms,
            max_iter=self.max_iter, tol=self.tol, seed=self.random_state,
        )

    def fit_transform(self, X, y=None):
        X, image_shape = as_image_matrix(X)
        fac = factorize(X, self._config())
        self.components_ = fac.W
        self.codes_ = fac.H
        self.objective_trace_ = np.asarray(fac.objective_trace)
        self.n_iter_ = fac.n_iter
        self.image_shape_ = image_shape
        self.n_features_in_ = X.shape[1]
        return fac.H

    def fit(self, X, y=None):
        self.fit_transform(X)
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X, _ = as_image_matrix(X, n_features=self.n_features_in_)
        s = self.sparsity_codes if self.transform_sparsity == "codes" else None
        return encode_offline(X, self.components_, s_H=s)

    def inverse_transform(self, H):
        check_is_fitted(self, "components_")
        return reconstruct(H, self.components_)

    @property
    def reconstruction_err_(self):
        return float(np.sqrt(self.objective_trace_[-1]))
