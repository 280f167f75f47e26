"""Exception types shared across modules."""

from __future__ import annotations


class ConfigError(ValueError):
    """A configuration value violates its contract (bad dims, ranges, paths)."""
