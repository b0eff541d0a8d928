"""Synthetic-to-real segmentation adaptation on a procedural toy dataset."""

__version__ = "0.1.0"
