"""Whole-brain anatomical segmentation computed directly on diffusion MRI."""

__version__ = "0.1.0"
