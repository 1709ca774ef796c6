"""Flat grayscale morphology and part-based operator approximation.

Images are arrays whose last two axes are (rows, cols); leading axes are
treated as a batch.  Out-of-grid reads are 0 for dilation and 1 for
erosion, which keeps (dilate, erode) an adjunction on the finite grid for
intensities in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class StructuringElement:
    """Set of integer (dy, dx) offsets; always contains the origin."""

    offsets: tuple[tuple[int, int], ...]

    def __post_init__(self):
        offsets = tuple(sorted({(int(dy), int(dx)) for dy, dx in self.offsets}))
        if (0, 0) not in offsets:
            raise ValueError("structuring element must contain the origin")
        object.__setattr__(self, "offsets", offsets)

    @property
    def reach(self) -> int:
        return max(max(abs(dy), abs(dx)) for dy, dx in self.offsets)

    def reflect(self) -> "StructuringElement":
        return StructuringElement(tuple((-dy, -dx) for dy, dx in self.offsets))

    def __len__(self):
        return len(self.offsets)


def disk_se(radius: float) -> StructuringElement:
    """Euclidean disk ``{(dy, dx) : dy**2 + dx**2 <= radius**2}``.

    Radius 1 gives the 5-pixel cross, radius 1.5 the 3x3 square.
    """
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    r = int(math.floor(radius))
    r2 = radius * radius
    return StructuringElement(tuple(
        (dy, dx)
        for dy in range(-r, r + 1)
        for dx in range(-r, r + 1)
        if dy * dy + dx * dx <= r2
    ))


def _shifted_reduce(img, offsets, pad_value, reduce, sign):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim < 2:
        raise ValueError("image must have at least two dimensions")
    reach = max(max(abs(dy), abs(dx)) for dy, dx in offsets)
    if reach == 0:
        return img.copy()
    h, w = img.shape[-2:]
    pad = [(0, 0)] * (img.ndim - 2) + [(reach, reach), (reach, reach)]
    padded = np.pad(img, pad, mode="constant", constant_values=pad_value)
    out = None
    for dy, dx in offsets:
        # read img(p + sign * o)
        y0 = reach + sign * dy
        x0 = reach + sign * dx
        view = padded[..., y0:y0 + h, x0:x0 + w]
        out = view.copy() if out is None else reduce(out, view, out=out)
    return out


def dilate(img, se: StructuringElement) -> np.ndarray:
    """``out(p) = max_{o in se} img(p - o)``, zero outside the grid."""
    return _shifted_reduce(img, se.offsets, 0.0, np.maximum, -1)


def erode(img, se: StructuringElement) -> np.ndarray:
    """``out(p) = min_{o in se} img(p + o)``, one outside the grid."""
    return _shifted_reduce(img, se.offsets, 1.0, np.minimum, +1)


def opening(img, se: StructuringElement) -> np.ndarray:
    return dilate(erode(img, se), se)


def closing(img, se: StructuringElement) -> np.ndarray:
    return erode(dilate(img, se), se)


@dataclass(frozen=True)
class Dictionary:
    """k non-negative atom images stacked as ``(k, height, width)``."""

    atoms: np.ndarray

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=np.float64)
        if atoms.ndim != 3:
            raise ValueError(f"atoms must have shape (k, H, W), got {atoms.shape}")
        if np.any(atoms < 0):
            raise ValueError("dictionary atoms must be non-negative")
        atoms.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)

    @classmethod
    def from_matrix(cls, W, image_shape) -> "Dictionary":
        W = np.asarray(W, dtype=np.float64)
        return cls(W.reshape(W.shape[0], *image_shape))

    @property
    def k(self) -> int:
        return self.atoms.shape[0]

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.atoms.shape[1], self.atoms.shape[2]

    def as_matrix(self) -> np.ndarray:
        return self.atoms.reshape(self.k, -1)


def dilate_dictionary(dictionary: Dictionary, se: StructuringElement) -> Dictionary:
    return Dictionary(dilate(dictionary.atoms, se))


def part_based_apply(h, processed: Dictionary) -> np.ndarray:
    """Recombine processed atoms with codes: ``sum_j h_j * phi(w_j)``.

    ``h`` is a length-k vector (returns one image) or an (M, k) batch
    (returns M images).  The result is not clipped.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != processed.k or h.ndim not in (1, 2):
        raise ValueError(
            f"code length {h.shape[-1] if h.ndim else 0} does not match "
            f"dictionary size {processed.k}"
        )
    flat = h @ processed.as_matrix()
    return flat.reshape(h.shape[:-1] + processed.image_shape)
