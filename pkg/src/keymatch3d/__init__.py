"""Jointly learned keypoint detection and description on depth images,
trained from synthetic pose-annotated depth pairs."""

from ._validation import ConfigurationError, DomainError, TrainingError
from .estimator import KeypointDetectorDescriptor, RepositoryMatcher

__all__ = [
    "ConfigurationError",
    "DomainError",
    "KeypointDetectorDescriptor",
    "RepositoryMatcher",
    "TrainingError",
]

__version__ = "0.1.0"
