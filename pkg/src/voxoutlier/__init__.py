"""Voxel-level outlier detection from siamese patch representations."""

__version__ = "0.1.0"
