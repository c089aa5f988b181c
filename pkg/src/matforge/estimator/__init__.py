"""Pixel-level SVBRDF estimation: equalization, KD-tree lookup, index transfer."""

from .core import (
    ROLE_DEFAULTS,
    DiffuseReferencedTransfer,
    SVBRDFEstimator,
    SVBRDFSet,
    estimate,
    material_maps_at,
    resize_wrap,
    transfer_region,
)
from .equalize import HistogramEqualizer, equalization_lut, hist_equalize
from .kdtree import PixelIndex, unique_rows

build_pixel_index = PixelIndex

__all__ = [
    "ROLE_DEFAULTS",
    "DiffuseReferencedTransfer",
    "HistogramEqualizer",
    "PixelIndex",
    "SVBRDFEstimator",
    "SVBRDFSet",
    "build_pixel_index",
    "equalization_lut",
    "estimate",
    "hist_equalize",
    "material_maps_at",
    "resize_wrap",
    "transfer_region",
    "unique_rows",
]
