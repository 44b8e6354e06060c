"""Pose-aware video super-resolution with linear spatial-temporal attention."""

__version__ = "0.1.0"
