"""Local Climate Zone mapping: raster patches, rule-assisted labels, RF and multi-scale CNN classifiers."""

from .classes import CLASS_NAMES, N_CLASSES, LczClass
from .errors import (
    ConfigError,
    DatasetFormatError,
    GeometryMismatchError,
    LczError,
    MalformedRasterError,
    ModelFormatError,
    NodataContaminationError,
    OutOfBoundsError,
    TrainingDivergenceError,
)
from .raster import Patch, RasterGrid, compute_ndvi, extract_patch, load_raster, resample_mean, save_raster

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES", "N_CLASSES", "ConfigError", "DatasetFormatError", "GeometryMismatchError",
    "LczClass", "LczError", "MalformedRasterError", "ModelFormatError",
    "NodataContaminationError", "OutOfBoundsError", "Patch", "RasterGrid",
    "TrainingDivergenceError", "compute_ndvi", "extract_patch", "load_raster",
    "resample_mean", "save_raster",
]
