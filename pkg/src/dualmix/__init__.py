"""Dual-level domain mixing for semi-supervised domain adaptation on a toy segmentation task."""

__version__ = "0.1.0"
