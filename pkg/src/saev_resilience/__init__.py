"""Shared autonomous electric fleet operation with vehicle-to-building backup power."""

__version__ = "0.1.0"
