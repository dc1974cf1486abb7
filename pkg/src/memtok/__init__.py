"""memtok: dual-branch video token compression with FIFO clip memory."""

from .errors import (
    CacheError,
    ConfigError,
    DivergenceError,
    FormatError,
    OracleError,
    ShapeError,
)
from .estimator import VideoTokenCompressor
from .tensor import PoolConfig, Tape, Tensor, precision, set_default_dtype

__version__ = "0.1.0"

__all__ = [
    "CacheError",
    "ConfigError",
    "DivergenceError",
    "FormatError",
    "OracleError",
    "PoolConfig",
    "ShapeError",
    "Tape",
    "Tensor",
    "VideoTokenCompressor",
    "precision",
    "set_default_dtype",
    "__version__",
]
