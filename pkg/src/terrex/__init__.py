"""Terrain extension: predict occluded road points from a partial lidar scan."""

from terrex.cloud import Aabb, PointCloud, VoxelGeometry, VoxelGrid
from terrex.errors import (
    ConfigError,
    DomainError,
    FormatError,
    InputTooSmall,
    LengthError,
    NumericError,
    QueryError,
    SampleRejected,
    ShapeError,
    TerrexError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "Aabb",
    "PointCloud",
    "VoxelGeometry",
    "VoxelGrid",
    "TerrexError",
    "FormatError",
    "LengthError",
    "ConfigError",
    "DomainError",
    "InputTooSmall",
    "QueryError",
    "NumericError",
    "ShapeError",
    "SampleRejected",
    "ValidationError",
]
