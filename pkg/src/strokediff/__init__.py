"""Conditional diffusion over ordered sets of cubic Bezier strokes."""

from .errors import ConfigError, DataError, NumericalError, ShapeError, StrokeDiffError, SVGParseError
from .geometry import Sketch

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "NumericalError",
    "SVGParseError",
    "ShapeError",
    "Sketch",
    "StrokeDiffError",
    "__version__",
]
