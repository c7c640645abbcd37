"""Semantic code search with convolutional encoders and attention rescaling."""

__version__ = "0.1.0"
