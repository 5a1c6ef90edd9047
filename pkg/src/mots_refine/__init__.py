"""Refinement of multi-object tracking and segmentation results."""

__version__ = "0.1.0"
