"""Sparse dictionaries whose atoms approximately commute with dilation.

Two learners produce a non-negative dictionary ``W`` and codes ``H`` with
``X ~ H W``: a sparseness-constrained NMF (:class:`SparseNMF`) and an
asymmetric auto-encoder with a single non-negative linear decoder layer
(:class:`AsymAE`).  :mod:`morphdict.evaluation` measures how well the
code-weighted sum of dilated atoms tracks the dilation of each image.
"""

from .asymae import AsymAE, AsymAeConfig, AsymAeModel, TrainingDivergedError
from .dataset import BatchPlan, ImageSet, load_idx_images, load_idx_labels, load_split, make_batches
from .evaluation import MetricsReport, emit_report, evaluate, montage, write_montage
from .morphology import (Dictionary, StructuringElement, closing, dilate, dilate_dictionary,
                         disk_se, erode, opening, part_based_apply)
from .nmf import Factorization, NmfConfig, SparseNMF, encode_offline, factorize
from .sparsity import hoyer_sigma, project_sparseness

__version__ = "0.1.0"

__all__ = [
    "AsymAE", "AsymAeConfig", "AsymAeModel", "BatchPlan", "Dictionary", "Factorization",
    "ImageSet", "MetricsReport", "NmfConfig", "SparseNMF", "StructuringElement",
    "TrainingDivergedError", "closing", "dilate", "dilate_dictionary", "disk_se",
    "emit_report", "encode_offline", "erode", "evaluate", "factorize", "hoyer_sigma",
    "load_idx_images", "load_idx_labels", "load_split", "make_batches", "montage",
    "opening", "part_based_apply", "project_sparseness", "write_montage",
]
