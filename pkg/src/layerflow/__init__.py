"""Layered RGBA poster generation and decomposition at desk scale."""

__version__ = "0.1.0"
