"""Chest X-ray infection segmentation and pneumonia classification.

A numpy-backed deep-learning stack: reverse-mode autodiff core, VGG-style
encoder shared between a U-Net segmenter and a dense-block classifier,
transfer learning with gradual unfreezing, Grad-CAM explanations, and a
command-line pipeline over manifest-listed PNG/PGM images.
"""

from .errors import (AutodiffError, CheckpointError, ConfigError, DataError,
                     MetricError, NumericError, PneumonetError, ShapeError,
                     TransferError)
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "PneumonetError",
    "ShapeError",
    "AutodiffError",
    "ConfigError",
    "DataError",
    "CheckpointError",
    "TransferError",
    "MetricError",
    "NumericError",
    "__version__",
]
