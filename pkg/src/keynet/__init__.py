"""Keyed convolutional network inference on optically transformed images.

The package lowers small convolutional networks to sparse affine matrices,
keys them with generalized doubly stochastic matrices under a privacy
parameter alpha, and performs exact inference on key-transformed inputs.
It also ships the supporting cast: a tiled sparse format, an optical fiber
bundle and CMOS sensor simulation, and privacy-analysis tools.
"""

__version__ = "0.1.0"

from . import analysis, keyed, keys, network, sensor, sparse, zoo
from .errors import (
    ContractError,
    FormatError,
    KeynetError,
    ParameterError,
    ShapeError,
    SingularSystemError,
    UnsupportedExactError,
    UnsupportedLayerError,
    WrongSensorError,
)

__all__ = [
    "analysis",
    "keyed",
    "keys",
    "network",
    "sensor",
    "sparse",
    "zoo",
    "ContractError",
    "FormatError",
    "KeynetError",
    "ParameterError",
    "ShapeError",
    "SingularSystemError",
    "UnsupportedExactError",
    "UnsupportedLayerError",
    "WrongSensorError",
    "__version__",
]
