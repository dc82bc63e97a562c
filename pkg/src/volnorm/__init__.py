"""Normalization layers for volumetric segmentation at batch size 1."""
from .normlayers import (AffineParams, NormMethod, RunningStats, build_partition,
                         norm_backward, norm_forward, norm_infer)
from .tensor import NormPartition, Shape5

__all__ = [
    "AffineParams", "NormMethod", "RunningStats", "build_partition", "norm_backward",
    "norm_forward", "norm_infer", "NormPartition", "Shape5",
]
__version__ = "0.1.0"
