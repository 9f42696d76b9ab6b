"""Attention U-Net GAN super-resolution for endoscopic images, with evaluation and statistics tooling."""

__version__ = "0.1.0"

from .errors import (ConfigurationError, DatasetError, DegenerateSampleError, EndoSRError, FormatError,
                     InputError, NumericalError, StorageError)
from .kernels import BACKEND

__all__ = [
    "__version__", "BACKEND", "EndoSRError", "ConfigurationError", "InputError", "DatasetError",
    "DegenerateSampleError", "NumericalError", "StorageError", "FormatError",
]
