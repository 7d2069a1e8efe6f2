"""Photoacoustic needle visibility toolkit.

End-to-end pipeline for LED photoacoustic needle imaging: 2D Monte Carlo
light transport, k-space pseudospectral acoustic forward simulation,
frequency-domain (f-k) image reconstruction, semi-synthetic dataset
generation, a from-scratch convolutional network that isolates the needle,
and classical detection baselines (thresholding, Hough transform) with
localization metrics.
"""

from panvis.core import (
    Grid2D,
    PixelImage,
    RfFrame,
    ScalarField,
    TransducerArray,
    read_container,
    resize_bicubic,
    write_container,
)

__version__ = "0.1.0"

__all__ = [
    "Grid2D",
    "PixelImage",
    "RfFrame",
    "ScalarField",
    "TransducerArray",
    "read_container",
    "resize_bicubic",
    "write_container",
    "__version__",
]
