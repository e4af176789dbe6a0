"""Spatial multilevel regression and poststratification."""

__version__ = "0.1.0"
