"""Reconstruction, code sparsity and dilation-approximation metrics; reports and montages."""

from __future__ import annotations

import csv
import io
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from ._validation import check_shape_match
from .morphology import Dictionary, StructuringElement, dilate, dilate_dictionary, part_based_apply
from .sparsity import hoyer_sigma_rows

REPORT_HEADER = ("model", "dataset", "k", "rec_error", "code_sparsity", "dilation_error")


def clip01(images):
    return np.clip(np.asarray(images, dtype=np.float64), 0.0, 1.0)


def _flat(a, m=None):
    a = np.asarray(a, dtype=np.float64)
    if m is None:
        m = a.shape[0]
    return a.reshape(m, -1)


def reconstruction_error(X, X_hat, clip: bool = True) -> float:
    """Pixel-wise mean squared error between images and their reconstructions.

    ``X_hat`` is clipped to [0, 1] first unless ``clip`` is False.
    """
    X = _flat(X)
    X_hat = _flat(clip01(X_hat) if clip else X_hat, X.shape[0])
    if X.shape != X_hat.shape:
        raise ValueError(f"shape mismatch: {X.shape} vs {X_hat.shape}")
    return float(np.mean((X - X_hat) ** 2))


def mean_code_sparsity(H) -> float:
    """Mean Hoyer sparseness of the code rows; all-zero rows are skipped with a warning.

    A single-atom code has one non-zero coefficient and counts as fully sparse.
    """
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    if H.shape[1] == 1:
        s = np.where(H[:, 0] != 0, 1.0, np.nan)
    else:
        s = hoyer_sigma_rows(H)
    zero = np.isnan(s)
    if zero.all():
        raise ValueError("code sparsity is undefined: every code vector is zero")
    if zero.any():
        warnings.warn(f"{int(zero.sum())} all-zero code rows skipped in code sparsity",
                      RuntimeWarning)
    return float(np.mean(s[~zero]))


def part_based_dilation(H, dictionary: Dictionary, se: StructuringElement,
                        offset=None, activation=None) -> np.ndarray:
    """Part-based approximation of the dilation, one image per code row (unclipped).

    With ``offset``/``activation`` the dilated atoms go through the same
    affine + activation read-out as the auto-encoder decoder.
    """
    dilated = dilate_dictionary(dictionary, se)
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    if offset is None and activation is None:
        return part_based_apply(H, dilated)
    z = H @ dilated.as_matrix()
    if offset is not None:
        z = z + np.asarray(offset, dtype=np.float64).reshape(-1)
    if activation is not None:
        z = activation(z)
    return z.reshape(H.shape[0], *dictionary.image_shape)


def dilation_approx_error(X, H, dictionary: Dictionary, se: StructuringElement,
                          offset=None, activation=None, workers: int = 1) -> float:
    """MSE between the true dilation of each image and its clipped part-based approximation.

    ``workers > 1`` dilates the images in chunks on a thread pool; the
    per-image squared errors are summed in image order either way, so the
    result does not depend on the worker count.
    """
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    X = np.asarray(X, dtype=np.float64)
    m = H.shape[0]
    check_shape_match(X.shape[0], m, "image count", "code count")
    X = X.reshape(m, *dictionary.image_shape)
    approx = clip01(part_based_dilation(H, dictionary, se, offset, activation))
    if workers > 1 and m > 1:
        chunks = np.array_split(np.arange(m), min(workers, m))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            target = np.concatenate(list(pool.map(lambda idx: dilate(X[idx], se), chunks)))
    else:
        target = dilate(X, se)
    return float(np.mean((approx - target) ** 2))


@dataclass
class MetricsReport:
    model: str
    dataset: str
    k: int
    reconstruction_error: float
    mean_code_sparsity: float
    dilation_approx_error: float
    timestamp: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def __post_init__(self):
        if self.reconstruction_error < 0 or self.dilation_approx_error < 0:
            raise ValueError("errors must be non-negative")
        if not 0.0 <= self.mean_code_sparsity <= 1.0:
            raise ValueError("code sparsity must lie in [0, 1]")

    def row(self):
        return (self.model, self.dataset, str(int(self.k)), _fmt(self.reconstruction_error),
                _fmt(self.mean_code_sparsity), _fmt(self.dilation_approx_error))


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def evaluate(model: str, dataset: str, X, H, reconstruction, dictionary: Dictionary,
             se: StructuringElement, offset=None, activation=None,
             workers: int = 1) -> MetricsReport:
    """All three metrics for one (model, data set) pair."""
    return MetricsReport(
        model=model, dataset=dataset, k=dictionary.k,
        reconstruction_error=reconstruction_error(X, reconstruction),
        mean_code_sparsity=mean_code_sparsity(H),
        dilation_approx_error=dilation_approx_error(X, H, dictionary, se, offset, activation,
                                                    workers),
    )


def emit_report(reports) -> str:
    """CSV with header ``model,dataset,k,rec_error,code_sparsity,dilation_error``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_HEADER)
    for rep in reports:
        writer.writerow(rep.row())
    return buf.getvalue()


def parse_report(text: str) -> list[MetricsReport]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != REPORT_HEADER:
        raise ValueError("missing or unexpected report header")
    return [MetricsReport(r[0], r[1], int(r[2]), float(r[3]), float(r[4]), float(r[5]), "")
            for r in rows[1:]]


# --- montages -----------------------------------------------------------

SEPARATOR = 0.5


def _normalise_tile(tile):
    lo, hi = float(tile.min()), float(tile.max())
    if hi - lo <= 0.0:
        return np.full_like(tile, 0.5)
    return (tile - lo) / (hi - lo)


def montage(images, cols: int, normalize: bool = True) -> np.ndarray:
    """Row-major grid of tiles with 1-pixel separators at intensity 0.5.

    Each tile is min-max normalised on its own unless ``normalize`` is
    False, in which case values are clipped to [0, 1].
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or images.shape[0] == 0:
        raise ValueError("montage needs a non-empty (n, H, W) stack")
    if cols < 1:
        raise ValueError("cols must be >= 1")
    n, h, w = images.shape
    cols = min(cols, n)
    rows = math.ceil(n / cols)
    grid = np.full((rows * h + rows - 1, cols * w + cols - 1), SEPARATOR)
    for i, tile in enumerate(images):
        r, c = divmod(i, cols)
        tile = _normalise_tile(tile) if normalize else clip01(tile)
        grid[r * (h + 1):r * (h + 1) + h, c * (w + 1):c * (w + 1) + w] = tile
    return grid


def pgm_bytes(image) -> bytes:
    """Binary PGM (P5, maxval 255) of an image with values in [0, 1]."""
    image = clip01(image)
    h, w = image.shape
    pixels = np.rint(image * 255.0).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def read_pgm(raw: bytes) -> np.ndarray:
    """Parse a P5 PGM produced by :func:`pgm_bytes` back into [0, 1] floats."""
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    # exactly one whitespace byte separates the header from the raster
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1)
    return data.reshape(h, w) / float(maxval)


def write_montage(images, cols: int, path=None, normalize: bool = True) -> bytes:
    """Render :func:`montage` as PGM; writes it to ``path`` when given."""
    data = pgm_bytes(montage(images, cols, normalize))
    if path is not None:
        with open(path, "wb") as f:
            f.write(data)
    return data
