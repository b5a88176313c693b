"""Lesion detection and segmentation on 3D volumetric grids.

Pipeline: boosted cascade detection over integral-volume Haar and
self-aligned ray features, followed by CNN-steered adaptive level-set
segmentation, benchmarked on a built-in synthetic phantom generator.
"""

__version__ = "0.1.0"
