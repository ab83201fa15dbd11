"""Hierarchical fine-grained part segmentation of 3D point clouds."""

__version__ = "0.1.0"
