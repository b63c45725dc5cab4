"""Distance-map regression toolkit for imbalanced volumetric segmentation."""

from dmseg.errors import (
    DmsegError,
    InvalidArgumentError,
    NoBoundaryError,
    ShapeError,
    StateError,
    TrainingDivergedError,
    UnsupportedVariantError,
)

__version__ = "0.1.0"

__all__ = [
    "DmsegError",
    "InvalidArgumentError",
    "NoBoundaryError",
    "ShapeError",
    "StateError",
    "TrainingDivergedError",
    "UnsupportedVariantError",
    "__version__",
]
