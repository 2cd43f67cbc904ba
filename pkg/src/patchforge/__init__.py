"""Jigsaw-puzzle self-supervised pretraining for fully convolutional networks."""

from .archspec import (
    ArchSpec,
    LayerSpec,
    RFProfile,
    brute_force_rf,
    cell_assignment,
    compute_rf_profile,
    preset,
    rf_center,
)
from .puzzle import GridSpec, Permutation, PuzzleSample, assemble, divide, invert, sample_permutation

__version__ = "0.1.0"

__all__ = [
    "ArchSpec",
    "GridSpec",
    "LayerSpec",
    "Permutation",
    "PuzzleSample",
    "RFProfile",
    "assemble",
    "brute_force_rf",
    "cell_assignment",
    "compute_rf_profile",
    "divide",
    "invert",
    "preset",
    "rf_center",
    "sample_permutation",
]
