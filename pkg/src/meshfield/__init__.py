"""meshfield: mesh-anchored local implicit fields with teacher distillation,
text-keyword editing-region localization, and region-constrained editing."""

from . import cameras, distill, edit, field, geometry, guidance, locate, numerics
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    FrozenRegionError,
    NoRegionFoundError,
    OracleError,
)

__version__ = "0.1.0"

__all__ = [
    "cameras",
    "distill",
    "edit",
    "field",
    "geometry",
    "guidance",
    "locate",
    "numerics",
    "ConfigError",
    "DataError",
    "DivergenceError",
    "FrozenRegionError",
    "NoRegionFoundError",
    "OracleError",
]
