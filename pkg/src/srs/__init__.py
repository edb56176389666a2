"""Siamese reconstruction-segmentation engine with dynamic-parameter convolution."""

__version__ = "0.1.0"
