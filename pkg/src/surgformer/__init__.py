"""Multiresolution gated transformer surrogate for tetrahedral soft-tissue meshes."""

__version__ = "0.1.0"
