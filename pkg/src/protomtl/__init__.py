"""Prototype-guided multi-task 3D perception on synthetic voxel scenes."""

__version__ = "0.1.0"
