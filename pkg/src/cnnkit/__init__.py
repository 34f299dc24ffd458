"""Numpy deep-learning kit for assembled ResNet tweaks and regularizers."""

__version__ = "0.1.0"
