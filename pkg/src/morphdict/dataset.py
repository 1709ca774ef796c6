"""IDX ingestion (MNIST / Fashion-MNIST) and seeded batching."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

DATA_DIR_ENV = "MORPHDICT_DATA_DIR"


class IdxFormatError(ValueError):
    """Raised when a file does not carry the expected IDX magic number."""


class IdxLengthError(ValueError):
    """Raised when an IDX payload is shorter than its header declares."""


@dataclass(frozen=True)
class ImageSet:
    """Immutable stack of grayscale images with intensities in [0, 1].

    ``images`` has shape ``(M, height, width)``; ``labels`` is either None
    or an integer array of length M.
    """

    images: np.ndarray
    labels: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        if images.ndim != 3:
            raise ValueError(f"images must have shape (M, H, W), got {images.shape}")
        images = images.copy()
        images.setflags(write=False)
        object.__setattr__(self, "images", images)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64).copy()
            if labels.shape != (images.shape[0],):
                raise ValueError(
                    f"label count {labels.shape[0] if labels.ndim else 0} does not "
                    f"match image count {images.shape[0]}"
                )
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def as_matrix(self) -> np.ndarray:
        """The M x N data matrix, one flattened image per row."""
        return self.images.reshape(len(self), -1)

    def with_labels(self, labels) -> "ImageSet":
        return ImageSet(self.images, labels, self.name)

    def subset(self, indices) -> "ImageSet":
        indices = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[indices]
        return ImageSet(self.images[indices], labels, self.name)


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    seed: int
    order: np.ndarray = field(repr=False)

    def __iter__(self):
        for start in range(0, len(self.order), self.batch_size):
            yield self.order[start:start + self.batch_size]

    def __len__(self):
        return -(-len(self.order) // self.batch_size)

    @property
    def batch_sizes(self) -> list[int]:
        return [len(b) for b in self]


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        head = f.read(2)
        f.seek(0)
        raw = f.read()
    # gzip magic 1f 8b; IDX magics start with two zero bytes so there is no clash
    if head == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, ndim: int, path) -> np.ndarray:
    header_len = 4 + 4 * ndim
    if len(raw) < 4:
        raise IdxLengthError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">i", raw[:4])
    if found != magic:
        raise IdxFormatError(f"{path}: expected magic {magic}, found {found}")
    if len(raw) < header_len:
        raise IdxLengthError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "i" * ndim, raw[4:header_len])
    expected = int(np.prod(dims))
    payload = raw[header_len:]
    if len(payload) < expected:
        raise IdxLengthError(
            f"{path}: payload has {len(payload)} bytes, header declares {expected}"
        )
    return np.frombuffer(payload, dtype=np.uint8, count=expected).reshape(dims)


def load_idx_images(path, name: str | None = None) -> ImageSet:
    """Load an IDX3 image file (optionally gzipped) scaled to [0, 1]."""
    raw = _parse_idx(_read_bytes(path), IMAGE_MAGIC, 3, path)
    if name is None:
        name = os.path.basename(str(path))
    return ImageSet(raw.astype(np.float64) / 255.0, None, name)


def load_idx_labels(path) -> np.ndarray:
    """Load an IDX1 label file as an int64 array."""
    return _parse_idx(_read_bytes(path), LABEL_MAGIC, 1, path).astype(np.int64)


def images_to_idx_bytes(images: ImageSet | np.ndarray) -> bytes:
    """Serialize images in [0, 1] back to IDX3 bytes."""
    arr = images.images if isinstance(images, ImageSet) else np.asarray(images)
    if arr.ndim != 3:
        raise ValueError("expected an (M, H, W) image stack")
    pixels = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    return struct.pack(">4i", IMAGE_MAGIC, *arr.shape) + pixels.tobytes()


def labels_to_idx_bytes(labels) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">2i", LABEL_MAGIC, labels.shape[0]) + labels.tobytes()


def make_batches(images: ImageSet | int, batch_size: int, seed: int) -> BatchPlan:
    """Seeded shuffled batch plan; the last partial batch is kept.

    The permutation comes from numpy's PCG64 generator seeded with ``seed``.
    """
    if int(batch_size) < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    m = images if isinstance(images, (int, np.integer)) else len(images)
    order = np.random.Generator(np.random.PCG64(seed)).permutation(m)
    return BatchPlan(int(batch_size), int(seed), order)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _resolve(directory, stem):
    for candidate in (stem, stem + ".gz"):
        path = os.path.join(directory, candidate)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"no {stem}[.gz] under {directory}")


def load_split(directory=None, split: str = "test", name: str = "mnist") -> ImageSet:
    """Load a standard MNIST-layout split from ``directory``.

    Falls back to ``$MORPHDICT_DATA_DIR`` when ``directory`` is None.
    """
    if directory is None:
        directory = os.environ.get(DATA_DIR_ENV)
        if not directory:
            raise FileNotFoundError(f"no data directory given and ${DATA_DIR_ENV} unset")
    image_stem, label_stem = MNIST_FILES[split]
    images = load_idx_images(_resolve(directory, image_stem), name=name)
    try:
        labels = load_idx_labels(_resolve(directory, label_stem))
    except FileNotFoundError:
        return images
    return images.with_labels(labels)
