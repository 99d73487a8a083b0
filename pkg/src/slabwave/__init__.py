"""slabwave: pseudo-spectral viscous free-surface flow on a periodic slab."""

from .errors import (
    SlabwaveError,
    GridMismatch,
    ConfigError,
    DiffeomorphismLost,
    NonContraction,
)
from .grid import Grid
from .fields import SurfaceField, VolumeField

__all__ = [
    "SlabwaveError",
    "GridMismatch",
    "ConfigError",
    "DiffeomorphismLost",
    "NonContraction",
    "Grid",
    "SurfaceField",
    "VolumeField",
]

__version__ = "0.1.0"
