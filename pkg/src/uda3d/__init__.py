"""Unsupervised domain adaptation for a toy anchor-based 3D detector on synthetic LiDAR scenes."""

__version__ = "0.1.0"
