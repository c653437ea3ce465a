"""Clean-label feature-space poisoning: Bullseye/Convex Polytope attacks,
Feature Collision baseline, and k-NN / centroid sanitization defenses."""

__version__ = "0.1.0"

from bullseye.errors import (
    BullseyeError,
    ConfigurationError,
    DegenerateEmbeddingError,
    InputError,
    ManifestError,
    NoDataError,
    OracleScopeError,
    TrainingDivergenceError,
)

__all__ = [
    "__version__",
    "BullseyeError",
    "ConfigurationError",
    "DegenerateEmbeddingError",
    "InputError",
    "ManifestError",
    "NoDataError",
    "OracleScopeError",
    "TrainingDivergenceError",
]
