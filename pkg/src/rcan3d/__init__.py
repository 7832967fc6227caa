"""Volumetric brain-tumor segmentation with residual channel attention."""

__version__ = "0.1.0"
