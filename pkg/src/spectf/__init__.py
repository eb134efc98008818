"""Adaptive scalar-on-function regression by trend filtering."""

__version__ = "0.1.0"
