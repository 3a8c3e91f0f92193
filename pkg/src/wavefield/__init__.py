"""Plane-wave decomposition and cross-device sound-field synthesis."""

__version__ = "0.1.0"
