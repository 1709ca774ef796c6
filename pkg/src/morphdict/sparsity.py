"""Hoyer sparseness measure and the L1/L2 sparseness projection."""

from __future__ import annotations

import math

import numpy as np

MAX_PROJECTION_ITER = 200
PROJECTION_TOL = 1e-8


class ProjectionError(ArithmeticError):
    """The sparseness projection failed to reach a feasible point."""


def hoyer_sigma(v) -> float:
    """Sparseness in [0, 1]: 1 for a single non-zero entry, 0 for a flat vector.

    ``(sqrt(p) - |v|_1 / |v|_2) / (sqrt(p) - 1)`` for a vector of length p.
    """
    v = np.asarray(v, dtype=np.float64).ravel()
    p = v.size
    if p < 2:
        raise ValueError(f"sparseness needs at least 2 entries, got {p}")
    l2 = math.sqrt(float(np.dot(v, v)))
    if l2 == 0.0:
        raise ValueError("sparseness of the zero vector is undefined")
    l1 = float(np.abs(v).sum())
    sp = math.sqrt(p)
    return min(1.0, max(0.0, (sp - l1 / l2) / (sp - 1.0)))


def hoyer_sigma_rows(A) -> np.ndarray:
    """Row-wise sparseness; all-zero rows give NaN."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    p = A.shape[1]
    if p < 2:
        raise ValueError(f"sparseness needs at least 2 entries, got {p}")
    l1 = np.abs(A).sum(axis=1)
    l2 = np.sqrt(np.einsum("ij,ij->i", A, A))
    sp = math.sqrt(p)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = (sp - l1 / l2) / (sp - 1.0)
    return np.clip(s, 0.0, 1.0)


def target_l1(l2: float, sigma: float, p: int) -> float:
    """L1 norm a length-p vector with norm ``l2`` must have to reach ``sigma``."""
    sp = math.sqrt(p)
    return l2 * (sp - sigma * (sp - 1.0))


def check_target(sigma) -> float:
    sigma = float(sigma)
    if not 0.0 < sigma <= 1.0:
        raise ValueError(
            f"sparseness target must lie in (0, 1], got {sigma}; "
            "omit the target to express 'no constraint'"
        )
    return sigma


def project_sparseness(v, sigma: float, l2: float | None = None,
                       max_iter: int = MAX_PROJECTION_ITER) -> np.ndarray:
    """Closest non-negative vector with a given L2 norm and sparseness.

    ``l2`` defaults to the norm of ``v``.  Follows Hoyer's alternating
    projection: move onto the L1 hyperplane, then onto the L2 sphere
    around the centre of the active face, clamp negative coordinates to 0
    and repeat on the remaining ones.  Exact ties (the step direction
    vanishes) resolve toward the lowest index.
    """
    x = np.asarray(v, dtype=np.float64).ravel()
    return project_rows(x[None, :], sigma, l2=l2, max_iter=max_iter)[0]


def project_rows(A, sigma: float, l2=None, max_iter: int = MAX_PROJECTION_ITER) -> np.ndarray:
    """Row-wise :func:`project_sparseness`, vectorised over rows.

    ``l2`` is None (keep each row's norm), a scalar, or one norm per row.
    Rows whose target norm is 0 come back as zeros.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    r, n = A.shape
    if n < 2:
        raise ValueError("projection needs at least 2 entries")
    sigma = check_target(sigma)
    if l2 is None:
        norms = np.sqrt(np.einsum("ij,ij->i", A, A))
    else:
        norms = np.broadcast_to(np.asarray(l2, dtype=np.float64), (r,)).copy()
    if np.any(norms < 0) or not np.all(np.isfinite(norms)):
        raise ValueError("target L2 norms must be finite and non-negative")

    out = np.zeros_like(A)
    rows = np.flatnonzero(norms > 0.0)
    if rows.size == 0:
        return out
    l2r = norms[rows]
    l1r = l2r * (math.sqrt(n) - sigma * (math.sqrt(n) - 1.0))
    S = A[rows] + ((l1r - A[rows].sum(axis=1)) / n)[:, None]
    Z = np.zeros(S.shape, dtype=bool)
    pending = np.arange(rows.size)

    for it in range(max_iter):
        s, z, l1, l2v = S[pending], Z[pending], l1r[pending], l2r[pending]
        free = ~z
        n_free = free.sum(axis=1)
        m = np.where(free, (l1 / n_free)[:, None], 0.0)
        d = np.where(free, s - m, 0.0)
        a = np.einsum("ij,ij->i", d, d)
        c = np.einsum("ij,ij->i", m, m) - l2v * l2v
        flat = a <= (1e-12 * l2v) ** 2
        at_centre = flat & (c >= -(PROJECTION_TOL * l2v) ** 2)
        lean = flat & ~at_centre
        if lean.any():
            # degenerate direction: lean toward the first free coordinate
            first = np.argmax(free[lean], axis=1)
            dl = np.where(free[lean], (-1.0 / n_free[lean])[:, None], 0.0)
            dl[np.arange(dl.shape[0]), first] += 1.0
            d[lean] = dl
            a[lean] = np.einsum("ij,ij->i", dl, dl)
        b = 2.0 * np.einsum("ij,ij->i", m, d)
        disc = b * b - 4.0 * a * c
        bad = (disc < 0.0) & ~at_centre
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise ProjectionError(
                f"no real step at iteration {it}: {int(n_free[i])} free coordinates "
                f"cannot carry L1={l1[i]:.6g} at L2={l2v[i]:.6g}"
            )
        with np.errstate(invalid="ignore", divide="ignore"):
            alpha = np.where(at_centre, 0.0, (-b + np.sqrt(np.maximum(disc, 0.0))) / (2.0 * a))
        s = m + alpha[:, None] * d
        negative = s < 0.0
        finished = ~negative.any(axis=1)
        S[pending] = s
        cont = ~finished
        if cont.any():
            zc = z[cont] | negative[cont]
            sc = np.where(zc, 0.0, s[cont])
            nfc = (~zc).sum(axis=1)
            shift = (sc.sum(axis=1) - l1[cont]) / nfc
            sc = np.where(zc, 0.0, sc - shift[:, None])
            idx = pending[cont]
            S[idx] = sc
            Z[idx] = zc
        pending = pending[cont]
        if pending.size == 0:
            break
    else:
        raise ProjectionError(
            f"sparseness projection did not converge in {max_iter} iterations "
            f"({pending.size} of {rows.size} vectors pending, n={n}, sigma={sigma})"
        )
    out[rows] = S
    return out


def project_columns(A, sigma: float, l2=None, max_iter: int = MAX_PROJECTION_ITER) -> np.ndarray:
    """Column-wise :func:`project_sparseness`."""
    A = np.asarray(A, dtype=np.float64)
    return project_rows(A.T, sigma, l2=l2, max_iter=max_iter).T
