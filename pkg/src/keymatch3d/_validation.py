"""Input validation helpers shared by the estimators and the pipeline modules."""

from __future__ import annotations

import numbers

import numpy as np


class DomainError(ValueError):
    """An argument lies outside an operation's mathematical domain."""


class ConfigurationError(ValueError):
    """A configuration cannot produce valid output (bad keys, impossible bounds)."""


class TrainingError(RuntimeError):
    """Training hit a non-finite loss; ``dump_path`` names the saved batch if any."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


def check_scalar(x, name, *, target_type=numbers.Real, min_val=None, max_val=None, include_min=True):
    if not isinstance(x, target_type) or isinstance(x, bool):
        raise DomainError(f"{name} must be {target_type.__name__}, got {type(x).__name__}")
    if not np.isfinite(x):
        raise DomainError(f"{name} must be finite, got {x}")
    if min_val is not None:
        if (include_min and x < min_val) or (not include_min and x <= min_val):
            op = ">=" if include_min else ">"
            raise DomainError(f"{name} must be {op} {min_val}, got {x}")
    if max_val is not None and x > max_val:
        raise DomainError(f"{name} must be <= {max_val}, got {x}")
    return x


def check_depth_array(data, name="depth"):
    """Return ``data`` as a finite, non-negative 2-D float array."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise DomainError(f"{name} must be a non-empty 2-D raster, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise DomainError(f"{name} must hold finite non-negative depths")
    return arr


def check_rng(seed_or_rng):
    """Accept ``None``, an int seed, or a ``numpy.random.Generator``."""
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def check_same_length(a, b, what):
    if len(a) != len(b):
        raise DomainError(f"{what}: length mismatch ({len(a)} vs {len(b)})")
