"""DEM-guided diffusion inpainting for multi-band raster imagery."""

from satmaker.errors import (
    ConfigError,
    ContractError,
    DivergenceError,
    FormatError,
    GeometryError,
    IntegrityError,
    MissingReferenceError,
    SizeError,
    TruncationError,
)
from satmaker.raster_io import Raster, TileSet, read_raster, write_raster, tile, untile

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DivergenceError",
    "FormatError",
    "GeometryError",
    "IntegrityError",
    "MissingReferenceError",
    "SizeError",
    "TruncationError",
    "Raster",
    "TileSet",
    "read_raster",
    "write_raster",
    "tile",
    "untile",
]
