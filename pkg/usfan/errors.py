#!/usr/bin/env python3
"""Exception classes of the usfan package."""

__all__ = [
    "UsfanError",
    "ConfigError",
    "DataError",
    "DimensionError",
    "FrozenPartError",
    "NumericalError",
]


class UsfanError(Exception):
    """Generic exception class for the usfan package."""

    exit_code = 1


class ConfigError(UsfanError, ValueError):
    """Invalid or unreadable configuration."""

    exit_code = 1


class DataError(UsfanError, ValueError):
    """Missing or malformed data."""

    exit_code = 2


class DimensionError(DataError):
    """Array shapes do not chain."""


class FrozenPartError(UsfanError):
    """Gradient requested or applied on a frozen network part."""

    exit_code = 1


class NumericalError(UsfanError):
    """Numerical failure (non-PD matrix, non-finite values)."""

    exit_code = 3
