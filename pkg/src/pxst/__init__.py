"""Ptychographic x-ray speckle tracking reconstruction engine.

Recovers a beam's phase-gradient map (pixel map), an undistorted virtual
reference image of the scanned sample, refined sample translations and
downstream wavefront analytics from a stack of near-field projection
images, with a synthetic-data oracle, a CXI/HDF5 pipeline, a command-line
interface (``st``) and an embedded inspector web service.
"""

from . import analysis, cxi_io, geometry, integration, interp, preprocess, recon, sim
from .data_model import (
    ErrorMetrics,
    Geometry,
    GroundTruth,
    PixelMap,
    PixelMask,
    PixelTranslations,
    ReferenceImage,
    Roi,
    ScanData,
    Whitefield,
    validate,
)

__version__ = "0.1.0"
