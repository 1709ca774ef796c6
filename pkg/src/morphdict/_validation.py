"""Input validation shared by the estimators and functional API."""

from __future__ import annotations

import math

import numpy as np
from sklearn.utils.validation import check_array, check_non_negative


def square_shape(n_features: int) -> tuple[int, int]:
    side = math.isqrt(n_features)
    if side * side == n_features:
        return side, side
    return 1, n_features


def as_image_matrix(X, n_features: int | None = None, image_shape=None):
    """Coerce images to an (M, N) float64 matrix.

    Accepts an ``ImageSet``, an (M, H, W) stack or an (M, N) matrix.
    Returns the matrix and the (H, W) image shape (square when it can be
    inferred from N, else ``image_shape`` or (1, N)).
    """
    from .dataset import ImageSet

    if isinstance(X, ImageSet):
        X = X.images
    X = np.asarray(X)
    if X.ndim == 3:
        shape = X.shape[1:]
        X = X.reshape(X.shape[0], -1)
    else:
        shape = None
    X = check_array(X, dtype=np.float64, ensure_min_samples=1)
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"expected {n_features} features per image, got {X.shape[1]}")
    if shape is None:
        shape = tuple(image_shape) if image_shape is not None else square_shape(X.shape[1])
    if shape[0] * shape[1] != X.shape[1]:
        raise ValueError(f"image shape {shape} does not hold {X.shape[1]} pixels")
    return X, (int(shape[0]), int(shape[1]))


def check_non_negative_matrix(X, whom: str) -> np.ndarray:
    X = check_array(X, dtype=np.float64)
    check_non_negative(X, whom)
    return X


def check_shape_match(a: int, b: int, what_a: str, what_b: str):
    if a != b:
        raise ValueError(f"shape mismatch: {what_a} {a} != {what_b} {b}")
