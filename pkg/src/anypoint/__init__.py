"""Online any-point tracking with visibility-aware long-temporal attention,
context-aware cross-attention and scene-cut-triggered global matching."""

from anypoint.errors import (
    ConfigError,
    GradCheckError,
    InvalidInputError,
    InvalidStateError,
    TrackFileError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "GradCheckError",
    "InvalidInputError",
    "InvalidStateError",
    "TrackFileError",
    "__version__",
]
