"""Differentiable EPG-based MRI simulation and tissue probability map estimation."""

from bmapest.errors import BMapError, FormatError, NumericalError, ValidationError
from bmapest.phantom import (
    ProbabilityMaps,
    QuantitativeMaps,
    TissueParams,
    TissueTable,
    load_maps,
    mix,
    save_maps,
    synth_phantom,
)

__version__ = "0.1.0"

__all__ = [
    "BMapError",
    "FormatError",
    "NumericalError",
    "ValidationError",
    "ProbabilityMaps",
    "QuantitativeMaps",
    "TissueParams",
    "TissueTable",
    "load_maps",
    "mix",
    "save_maps",
    "synth_phantom",
]
