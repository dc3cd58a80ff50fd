"""Exceptions and input checks shared across the package."""

from __future__ import annotations

import numpy as np


class ConfigurationError(ValueError):
    """Raised for invalid settings, unknown names, or missing prerequisites."""


class IncompletePolicyError(KeyError):
    """Raised when a policy does not cover every required information set."""


class ContractError(ValueError):
    """Raised when an argument violates a documented precondition."""


class NumericalError(FloatingPointError):
    """Raised when a network or solver produces non-finite values."""


def check_finite(x, name="array"):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ContractError(f"{name} contains non-finite entries")
    return x


def check_unit_interval(value, name):
    value = float(value)
    if not 0.0 <= value <= 1.0 or not np.isfinite(value):
        raise ConfigurationError(f"{name} must lie in [0, 1], got {value}")
    return value


def check_distribution(p, mask=None, atol=1e-9, name="distribution"):
    """Validate that ``p`` is a probability vector (restricted to ``mask``)."""
    p = np.asarray(p, dtype=float)
    if np.any(p < -atol):
        raise ContractError(f"{name} has negative entries")
    if mask is not None and np.any(p[~np.asarray(mask, dtype=bool)] > atol):
        raise ContractError(f"{name} puts mass on illegal actions")
    total = p.sum(axis=-1)
    if not np.allclose(total, 1.0, atol=atol, rtol=0.0):
        raise ContractError(f"{name} does not sum to one")
    return p


def check_random_state(seed):
    """Return a ``numpy.random.Generator`` for ``seed``.

    Accepts ``None``, an int, a ``SeedSequence`` or an existing generator.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
