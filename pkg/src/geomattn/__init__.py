"""Geometric Attention networks for normals and sharp-feature prediction on point patches."""

__version__ = "0.1.0"
