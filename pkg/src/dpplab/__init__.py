"""Moment-based estimation of determinantal point process kernels."""

__version__ = "0.1.0"

from .errors import DppError, EstimationError, ValidationError  # noqa: E402
from .kernel import CorrelationKernel, LEnsemble, SignPattern, validate_kernel  # noqa: E402
from .estimator import EstimatedKernel, estimate  # noqa: E402
from .sampler import sample_dpp  # noqa: E402

__all__ = [
    "__version__",
    "CorrelationKernel",
    "DppError",
    "EstimatedKernel",
    "EstimationError",
    "LEnsemble",
    "SignPattern",
    "ValidationError",
    "estimate",
    "sample_dpp",
    "validate_kernel",
]
