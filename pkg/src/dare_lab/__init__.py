"""Desk-scale laboratory for difficulty-adaptive RL on a synthetic token world."""

from dare_lab.errors import (
    ConfigError,
    DataError,
    DegenerateWeightsError,
    DareLabError,
    BoundInapplicableError,
    HintFormatError,
    IntegrityError,
    NumericalError,
    SelectionError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DegenerateWeightsError",
    "DareLabError",
    "BoundInapplicableError",
    "HintFormatError",
    "IntegrityError",
    "NumericalError",
    "SelectionError",
]
